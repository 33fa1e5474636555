/**
 * Deterministic PRNG (PCG32) + Box-Muller gaussians.
 *
 * All randomness in the trainer flows through one seeded instance so a run
 * is fully reproducible within a platform stack.
 */

export class Rng {
  private state: bigint;
  private inc: bigint;
  private spare: number | null = null;

  constructor(seed: number, stream = 54n) {
    this.state = 0n;
    this.inc = (BigInt(stream) << 1n) | 1n;
    this.nextU32();
    this.state = (this.state + BigInt(seed >>> 0)) & 0xffffffffffffffffn;
    this.nextU32();
  }

  nextU32(): number {
    const old = this.state;
    this.state = (old * 6364136223846793005n + this.inc) & 0xffffffffffffffffn;
    const xorshifted = Number(((old >> 18n) ^ old) >> 27n & 0xffffffffn);
    const rot = Number(old >> 59n);
    return ((xorshifted >>> rot) | (xorshifted << ((-rot) & 31))) >>> 0;
  }

  /** Uniform in [0, 1). */
  float(): number {
    return this.nextU32() / 4294967296;
  }

  /** Uniform integer in [0, n). */
  int(n: number): number {
    return Math.floor(this.float() * n);
  }

  /** Standard normal via Box-Muller (cached spare). */
  gauss(): number {
    if (this.spare !== null) {
      const v = this.spare;
      this.spare = null;
      return v;
    }
    let u = 0;
    while (u === 0) u = this.float();
    const v = this.float();
    const r = Math.sqrt(-2 * Math.log(u));
    this.spare = r * Math.sin(2 * Math.PI * v);
    return r * Math.cos(2 * Math.PI * v);
  }
}
