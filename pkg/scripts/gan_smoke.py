"""GAN smoke run: SynthesisNet with the adversarial term on, auditing the
discriminator's normalized spectral norms after every step.

    python scripts/gan_smoke.py --steps 200
"""
import argparse

import numpy as np
import torch

from poseflow.config import toy_config
from poseflow.flownet import init_flow_params
from poseflow.toydata import toy_dataset
from poseflow.training import train_synthesis


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--power-tol", type=float, default=1e-5)
    ap.add_argument("--every", type=int, default=20)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    torch.set_num_threads(args.threads)
    cfg = toy_config(**{"train.steps": args.steps, "synth.width": 8, "synth.num_res_blocks": 2,
                        "train.lambdas": [1.0, 0.1, 0.002, 0.5], "train.power_tol": args.power_tol})
    samples = toy_dataset(8, seed=0)
    lo, hi = np.inf, -np.inf

    def audit(step, net, disc, terms):
        nonlocal lo, hi
        s = disc.normalized_sigmas(iters=30)
        lo, hi = min(lo, *s), max(hi, *s)
        if step % args.every == 0:
            gan = {k: round(v.item(), 4) for k, v in terms.items()}
            print(f"step {step:4d}  sigma [{min(s):.4f}, {max(s):.4f}]  {gan}", flush=True)

    train_synthesis(samples, init_flow_params(0, cfg.flow_net()), None, cfg, callback=audit)
    print(f"normalized sigma over the run: [{lo:.4f}, {hi:.4f}]")


if __name__ == "__main__":
    main()
