// Heatmap colors and the delta isoline via marching squares. The isoline is
// drawn from server-supplied values only.

export interface Segment {
  x1: number;
  y1: number;
  x2: number;
  y2: number;
}

// blue (unsafe, low value) -> white (at level) -> orange (safe, high value)
export function valueColor(v: number, level: number, span = 0.6): [number, number, number] {
  const t = Math.max(-1, Math.min(1, (v - level) / span));
  if (t < 0) {
    const u = 1 + t; // 0 at deep unsafe, 1 at the level
    return [Math.round(70 + 185 * u), Math.round(110 + 145 * u), 255];
  }
  const u = 1 - t;
  return [255, Math.round(165 + 90 * u), Math.round(60 + 195 * u)];
}

function interp(a: number, b: number, level: number): number {
  const d = b - a;
  if (d === 0) return 0.5;
  return (level - a) / d;
}

// Marching squares over a res x res grid of values laid out row-major with
// index i*res + j, where i indexes x and j indexes y. Returned coordinates
// are in cell units (x = i, y = j), to be scaled by the caller.
export function marchingSquares(values: number[], res: number, level: number): Segment[] {
  if (values.length !== res * res) throw new Error("value grid size mismatch");
  const segs: Segment[] = [];
  const at = (i: number, j: number) => values[i * res + j];
  for (let i = 0; i < res - 1; i++) {
    for (let j = 0; j < res - 1; j++) {
      const v00 = at(i, j);
      const v10 = at(i + 1, j);
      const v01 = at(i, j + 1);
      const v11 = at(i + 1, j + 1);
      let idx = 0;
      if (v00 >= level) idx |= 1;
      if (v10 >= level) idx |= 2;
      if (v11 >= level) idx |= 4;
      if (v01 >= level) idx |= 8;
      if (idx === 0 || idx === 15) continue;

      // edge midpoints with linear interpolation
      const bottom = (): [number, number] => [i + interp(v00, v10, level), j];
      const top = (): [number, number] => [i + interp(v01, v11, level), j + 1];
      const left = (): [number, number] => [i, j + interp(v00, v01, level)];
      const right = (): [number, number] => [i + 1, j + interp(v10, v11, level)];

      const push = (a: [number, number], b: [number, number]) =>
        segs.push({ x1: a[0], y1: a[1], x2: b[0], y2: b[1] });

      switch (idx) {
        case 1: case 14: push(left(), bottom()); break;
        case 2: case 13: push(bottom(), right()); break;
        case 3: case 12: push(left(), right()); break;
        case 4: case 11: push(right(), top()); break;
        case 6: case 9: push(bottom(), top()); break;
        case 7: case 8: push(left(), top()); break;
        case 5:
          push(left(), bottom());
          push(right(), top());
          break;
        case 10:
          push(left(), top());
          push(bottom(), right());
          break;
      }
    }
  }
  return segs;
}

// Area (cell count) of the sub-level region {v <= level}; used to check that
// lowering alpha never shrinks the flagged region.
export function sublevelCellCount(values: number[], level: number): number {
  let n = 0;
  for (const v of values) if (v <= level) n++;
  return n;
}
