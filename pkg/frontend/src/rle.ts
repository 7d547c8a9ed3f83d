/**
 * Run-length mask decoding and outline extraction.
 *
 * Masks arrive from the review API as row-major run lengths alternating
 * background/foreground, starting with a possibly-zero background run. The
 * outline is a set of closed loops along pixel-grid edges; rasterizing the
 * loops with the even-odd rule reproduces the decoded mask exactly, which is
 * what the conformance tests check.
 */

import type { MaskPayload } from "./types.js";

export type Point = [number, number];
export type Loop = Point[];

export function decodeRle(runs: number[], width: number, height: number): Uint8Array {
  const total = width * height;
  let sum = 0;
  for (const run of runs) {
    if (run < 0 || !Number.isInteger(run)) {
      throw new Error(`bad run length ${run}`);
    }
    sum += run;
  }
  if (sum !== total) {
    throw new Error(`runs sum to ${sum}, mask has ${total} pixels`);
  }
  const pixels = new Uint8Array(total);
  let offset = 0;
  let value = 0;
  for (const run of runs) {
    if (value === 1) {
      pixels.fill(1, offset, offset + run);
    }
    offset += run;
    value = 1 - value;
  }
  return pixels;
}

export function decodeMask(mask: MaskPayload): Uint8Array {
  return decodeRle(mask.runs, mask.width, mask.height);
}

const key = (x: number, y: number) => `${x},${y}`;

/**
 * Boundary loops of a binary mask, as polygon vertices on the pixel grid.
 * Edges are oriented so walking them keeps foreground on one consistent
 * side; loops may share corner points where pixels touch diagonally, which
 * is fine for even-odd filling.
 */
export function maskOutline(pixels: Uint8Array, width: number, height: number): Loop[] {
  const at = (x: number, y: number): number => {
    if (x < 0 || y < 0 || x >= width || y >= height) return 0;
    return pixels[y * width + x];
  };

  // Directed boundary edges indexed by their start vertex.
  const segments = new Map<string, Point[][]>();
  const addSegment = (x0: number, y0: number, x1: number, y1: number) => {
    const from = key(x0, y0);
    if (!segments.has(from)) segments.set(from, []);
    segments.get(from)!.push([
      [x0, y0],
      [x1, y1],
    ]);
  };

  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      if (!at(x, y)) continue;
      if (!at(x, y - 1)) addSegment(x, y, x + 1, y); // top, rightward
      if (!at(x + 1, y)) addSegment(x + 1, y, x + 1, y + 1); // right, down
      if (!at(x, y + 1)) addSegment(x + 1, y + 1, x, y + 1); // bottom, leftward
      if (!at(x - 1, y)) addSegment(x, y + 1, x, y); // left, up
    }
  }

  const loops: Loop[] = [];
  for (const [, bucket] of segments) {
    while (bucket.length > 0) {
      const [start, next] = bucket.pop()!;
      const loop: Loop = [start, next];
      let cursor = next;
      while (cursor[0] !== start[0] || cursor[1] !== start[1]) {
        const options = segments.get(key(cursor[0], cursor[1]));
        if (!options || options.length === 0) {
          throw new Error(`open boundary at ${cursor}`);
        }
        const [, to] = options.pop()!;
        loop.push(to);
        cursor = to;
      }
      loops.push(loop);
    }
  }
  return loops;
}

/**
 * Even-odd rasterization of outline loops back onto the pixel grid. A pixel
 * is foreground when a +x ray from its center crosses the loops an odd
 * number of times. Used by the decoder conformance tests; exact for the
 * axis-aligned unit edges maskOutline emits.
 */
export function rasterizeOutline(loops: Loop[], width: number, height: number): Uint8Array {
  // Only vertical edges can cross a horizontal ray through a pixel center.
  // A vertical edge spanning [y, y+1] at x crosses row py iff y === py.
  const verticalsByRow: Map<number, number[]> = new Map();
  for (const loop of loops) {
    for (let i = 0; i + 1 < loop.length; i++) {
      const [x0, y0] = loop[i];
      const [x1, y1] = loop[i + 1];
      if (x0 === x1) {
        const row = Math.min(y0, y1);
        if (!verticalsByRow.has(row)) verticalsByRow.set(row, []);
        verticalsByRow.get(row)!.push(x0);
      }
    }
  }
  const pixels = new Uint8Array(width * height);
  for (let py = 0; py < height; py++) {
    const xs = verticalsByRow.get(py) ?? [];
    for (let px = 0; px < width; px++) {
      let crossings = 0;
      for (const x of xs) {
        if (x > px + 0.5) crossings++;
      }
      pixels[py * width + px] = crossings % 2 === 1 ? 1 : 0;
    }
  }
  return pixels;
}
