"""Stage-II overfit on a handful of toy pairs: GarmentNet then SynthesisNet.

Trains a flow net first, then reports GarmentNet pixel accuracy and the
SynthesisNet masked l1 (with predicted and with ground-truth garments).

    python scripts/stage2_overfit.py --pairs 4 --garment-steps 300 --synth-steps 400
"""
import argparse
import time

import torch

from poseflow.config import toy_config
from poseflow.experiments import flow_recovery, garment_accuracy, synthesis_masked_l1
from poseflow.toydata import toy_dataset
from poseflow.training import train_garment, train_synthesis


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=4)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--flow-steps", type=int, default=600)
    ap.add_argument("--garment-steps", type=int, default=300)
    ap.add_argument("--synth-steps", type=int, default=400)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    torch.set_num_threads(args.threads)
    flow_data = toy_dataset(8, seed=args.data_seed)
    samples = flow_data[: args.pairs]

    t = time.time()
    flow_net, _, scores = flow_recovery(flow_data, 0, args.flow_steps, True)
    print(f"flow       EPE {scores.epe:.3f} px  ({time.time() - t:.0f}s)", flush=True)

    t = time.time()
    cfg = toy_config(**{"train.steps": args.garment_steps, "train.batch_size": args.pairs, "train.lr_gen": args.lr})
    garment_net, _ = train_garment(samples, flow_net, cfg)
    acc, worst, low = garment_accuracy(garment_net, flow_net, samples)
    print(f"garment    accuracy {acc:.4f}  max |sum-1| {worst:.1e}  min prob {low:.1e}  ({time.time() - t:.0f}s)", flush=True)

    t = time.time()
    cfg = toy_config(**{"train.steps": args.synth_steps, "train.batch_size": args.pairs, "train.lr_gen": args.lr,
                        "train.lambdas": [1.0, 0.1, 0.002, 0.0]})
    synth_net, _, _ = train_synthesis(samples, flow_net, garment_net, cfg)
    pred = synthesis_masked_l1(synth_net, flow_net, samples, garment_net)
    gt = synthesis_masked_l1(synth_net, flow_net, samples)
    print(f"synthesis  masked l1 {pred:.4f} (predicted garments)  {gt:.4f} (ground truth)  ({time.time() - t:.0f}s)")


if __name__ == "__main__":
    main()
