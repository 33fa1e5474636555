/**
 * Flat Float64Array matrix kernels. Everything is row-major; shapes are
 * passed explicitly. The three matmul variants (forward, dA, dB) are the
 * training loop's hot path - keep inner loops over contiguous memory.
 */

export function zeros(n: number): Float64Array {
  return new Float64Array(n);
}

/** C (n x m) = A (n x k) @ B (k x m); C is overwritten. */
export function matmul(a: Float64Array, b: Float64Array, c: Float64Array,
                       n: number, k: number, m: number): void {
  c.fill(0);
  for (let i = 0; i < n; i++) {
    const ai = i * k;
    const ci = i * m;
    for (let t = 0; t < k; t++) {
      const av = a[ai + t];
      if (av === 0) continue;
      const bt = t * m;
      for (let j = 0; j < m; j++) {
        c[ci + j] += av * b[bt + j];
      }
    }
  }
}

/** dA (n x k) += dC (n x m) @ B^T; B is (k x m). */
export function matmulGradA(dc: Float64Array, b: Float64Array, da: Float64Array,
                            n: number, k: number, m: number): void {
  for (let i = 0; i < n; i++) {
    const dci = i * m;
    const dai = i * k;
    for (let t = 0; t < k; t++) {
      const bt = t * m;
      let acc = 0;
      for (let j = 0; j < m; j++) {
        acc += dc[dci + j] * b[bt + j];
      }
      da[dai + t] += acc;
    }
  }
}

/** dB (k x m) += A^T @ dC; A is (n x k), dC is (n x m). */
export function matmulGradB(a: Float64Array, dc: Float64Array, db: Float64Array,
                            n: number, k: number, m: number): void {
  for (let i = 0; i < n; i++) {
    const ai = i * k;
    const dci = i * m;
    for (let t = 0; t < k; t++) {
      const av = a[ai + t];
      if (av === 0) continue;
      const bt = t * m;
      for (let j = 0; j < m; j++) {
        db[bt + j] += av * dc[dci + j];
      }
    }
  }
}

/** Cast every value through float32, in place; models the HQTM payload. */
export function roundF32(a: Float64Array): void {
  for (let i = 0; i < a.length; i++) a[i] = Math.fround(a[i]);
}

export function maxAbs(a: Float64Array): number {
  let m = 0;
  for (let i = 0; i < a.length; i++) {
    const v = Math.abs(a[i]);
    if (v > m) m = v;
  }
  return m;
}
