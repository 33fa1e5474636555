/** Plain Adam with bias correction. */

import { Param } from './model.js';
import { zeros } from './tensor.js';

export class Adam {
  private m: Float64Array[] = [];
  private v: Float64Array[] = [];
  private t = 0;

  constructor(private params: Param[], private lr: number,
              private beta1 = 0.9, private beta2 = 0.999,
              private eps = 1e-8) {
    for (const p of params) {
      this.m.push(zeros(p.data.length));
      this.v.push(zeros(p.data.length));
    }
  }

  setLr(lr: number): void {
    this.lr = lr;
  }

  step(): void {
    this.t += 1;
    const bc1 = 1 - Math.pow(this.beta1, this.t);
    const bc2 = 1 - Math.pow(this.beta2, this.t);
    for (let pi = 0; pi < this.params.length; pi++) {
      const p = this.params[pi];
      const m = this.m[pi];
      const v = this.v[pi];
      for (let i = 0; i < p.data.length; i++) {
        const g = p.grad[i];
        m[i] = this.beta1 * m[i] + (1 - this.beta1) * g;
        v[i] = this.beta2 * v[i] + (1 - this.beta2) * g * g;
        p.data[i] -= this.lr * (m[i] / bc1) / (Math.sqrt(v[i] / bc2) + this.eps);
      }
    }
  }
}
