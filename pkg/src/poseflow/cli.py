"""Command-line entry points: toydata, flow-train, garment-train, synth-train, infer, eval, gradcheck.

Training subcommands take ``--config FILE`` plus any number of dotted
``--section.key value`` flags (e.g. ``--train.steps 200``); flags win over the
file. Exit codes: 0 success, 1 failure, 2 missing checkpoint, 3 config error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import io
from .config import Config, ConfigError, config_keys, dump_config, parse_config
from .flownet import FlowNet
from .metrics import MetricError, epe, masked_metric, ms_ssim, ssim
from .synthesis import SynthNet, garmentnet_forward, synthesisnet_forward
from .training import collate, train_flow, train_garment, train_synthesis
from .types import IDENTITY_CLASSES, FlowPyramid, ValidationError
from .warp import inverse_warp

log = logging.getLogger("poseflow")

EXIT_FAIL, EXIT_MISSING, EXIT_CONFIG = 1, 2, 3
EVAL_COLUMNS = ("pair_id", "ssim", "ms_ssim", "masked_ssim", "masked_ms_ssim", "epe")


class MissingCheckpoint(FileNotFoundError):
    pass


# ----------------------------------------------------------------------------
# helpers


def _split_dotted(extra: list) -> dict:
    """Turn ``--a.b v`` / ``--a.b=v`` tokens into {"a.b": "v"}; anything else is a config error."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"flag {tok} needs a value")
            value = extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def _config(args, extra) -> Config:
    return parse_config(args.config, _split_dotted(extra))


def _config_from_checkpoint(meta: dict) -> Config:
    if "config" not in meta:
        raise ConfigError("checkpoint metadata has no config; retrain with this version")
    return parse_config(meta["config"])


def _require(path, what) -> Path:
    if path is None or not Path(path).is_file():
        raise MissingCheckpoint(f"{what} checkpoint not found: {path}")
    return Path(path)


def load_flow_net(path) -> FlowNet:
    tensors, meta = io.load_checkpoint(_require(path, "flow"))
    net = FlowNet(_config_from_checkpoint(meta).flow_net())
    io.load_into(net, path)
    return net.eval()


def load_synth_net(path, kind: str) -> SynthNet:
    tensors, meta = io.load_checkpoint(_require(path, kind))
    net = SynthNet(_config_from_checkpoint(meta).synth_net(kind))
    io.load_into(net, path)
    return net.eval()


def load_dataset(path, cfg: Config) -> list:
    p = Path(path)
    if p.is_dir():
        p = p / "pairs.txt"
    if not p.is_file():
        raise FileNotFoundError(f"pair list not found: {p}")
    return io.load_pair_list(p, cfg.data.num_parts, cfg.data.num_garments, cfg.data.residue_fill)


def start_run(run_dir, cfg: Config) -> Path:
    run = Path(run_dir)
    for sub in ("checkpoints", "logs", "samples"):
        (run / sub).mkdir(parents=True, exist_ok=True)
    (run / "config.snapshot").write_text(dump_config(cfg))
    return run


PALETTE = np.random.default_rng(7).uniform(-0.9, 0.9, (64, 3)).astype(np.float32)


def render_pose(pose_stack: np.ndarray) -> np.ndarray:
    """(H, W, Np+2) pose stack -> [-1, 1] colour rendering of the part ids."""
    ids = pose_stack[..., :-2].argmax(-1)
    img = PALETTE[ids % len(PALETTE)]
    img[ids == 0] = -1.0
    return img


def _hwc(t: torch.Tensor) -> np.ndarray:
    return t[0].detach().permute(1, 2, 0).cpu().numpy()


def run_inference(flow_net, garment_net, synth_net, pair, teacher_forcing: bool = False) -> dict:
    """Full two-stage pass on one pair; returns numpy HWC panels and the flow pyramid."""
    b = collate([pair])
    with torch.no_grad():
        flows = flow_net(torch.cat([b.I_s, b.P_s], 1), b.P_t)
        G_hat = b.G_t if teacher_forcing else garmentnet_forward(garment_net, b.G_s, b.P_s, b.P_t, flows, b.G_r).result
        o = synthesisnet_forward(synth_net, b.I_s, b.P_s, G_hat, b.P_t, flows, b.I_r)
        warped = inverse_warp(b.I_s, flows[0], synth_net.cfg.padding)
    return {
        "source": _hwc(b.I_s),
        "pose": render_pose(_hwc(b.P_t)),
        "warped": _hwc(warped),
        "fg": np.tanh(_hwc(o.fg)),
        "mask": np.repeat(_hwc(o.mask) * 2 - 1, 3, axis=2),
        "output": _hwc(o.result),
        "garment": _hwc(G_hat),
        "flows": FlowPyramid.from_tensors(flows),
        "gates": [_hwc(g)[..., 0] for g in o.attention_gates],
    }


GRID_COLUMNS = ("source", "pose", "warped", "fg", "mask", "output")


def grid(panels: dict, gap: int = 2) -> np.ndarray:
    cols = [np.clip(panels[k], -1, 1) for k in GRID_COLUMNS]
    h = cols[0].shape[0]
    sep = np.ones((h, gap, 3), np.float32)
    row = [cols[0]]
    for c in cols[1:]:
        row += [sep, c]
    return np.concatenate(row, 1)


# ----------------------------------------------------------------------------
# subcommands


def cmd_toydata(args, extra):
    if extra:
        raise ConfigError(f"unrecognized arguments {extra}")
    out = io.write_toy_dataset(args.out, args.n, args.seed, args.size)
    log.info("wrote %d toy pairs to %s", args.n, out)


def _write_history(run, hist):
    hist.write_csv(run / "logs" / "metrics.csv")


def cmd_flow_train(args, extra):
    cfg = _config(args, extra)
    data = load_dataset(args.data, cfg)
    run = start_run(args.run, cfg)
    net, hist = train_flow(data, cfg, run)
    _write_history(run, hist)
    net.eval()
    for rec in data[: args.samples]:
        b = collate([rec.pair])
        with torch.no_grad():
            flows = net(torch.cat([b.I_s, b.P_s], 1), b.P_t)
            io.save_png(run / "samples" / f"{rec.pair_id}_warped.png", _hwc(inverse_warp(b.I_s, flows[0], cfg.warp.padding)))
    log.info("flow checkpoint: %s", run / "checkpoints" / "flow.pfck")


def cmd_garment_train(args, extra):
    flow_net = load_flow_net(args.flow)
    cfg = _config(args, extra)
    data = load_dataset(args.data, cfg)
    run = start_run(args.run, cfg)
    net, hist = train_garment(data, flow_net, cfg, run)
    _write_history(run, hist)
    log.info("garment checkpoint: %s", run / "checkpoints" / "garment.pfck")


def cmd_synth_train(args, extra):
    flow_net = load_flow_net(args.flow)
    garment_net = load_synth_net(args.garment, "garment")
    cfg = _config(args, extra)
    data = load_dataset(args.data, cfg)
    run = start_run(args.run, cfg)
    net, disc, hist = train_synthesis(data, flow_net, garment_net, cfg, run)
    _write_history(run, hist)
    for rec in data[: args.samples]:
        io.save_png(run / "samples" / f"{rec.pair_id}_grid.png", grid(run_inference(flow_net, garment_net, net, rec.pair, cfg.train.teacher_forcing)))
    log.info("synthesis checkpoint: %s", run / "checkpoints" / "synthesis.pfck")


def cmd_infer(args, extra):
    flow_net = load_flow_net(args.flow)
    garment_net = load_synth_net(args.garment, "garment")
    synth_net = load_synth_net(args.synthesis, "synthesis")
    cfg = _config(args, extra)
    data = load_dataset(args.data, cfg)
    run = start_run(args.run, cfg)
    for rec in data:
        panels = run_inference(flow_net, garment_net, synth_net, rec.pair, cfg.train.teacher_forcing)
        io.save_png(run / "samples" / f"{rec.pair_id}.png", panels["output"])
        io.save_png(run / "samples" / f"{rec.pair_id}_grid.png", grid(panels))
        io.save_pyramid(run / "samples" / f"{rec.pair_id}.pflow", panels["flows"])
        for l, g in enumerate(panels["gates"]):
            io.save_png(run / "gates" / f"{rec.pair_id}_l{l}.png", g)
    log.info("wrote %d predictions to %s", len(data), run / "samples")


def _try(metric, *a):
    try:
        return metric(*a)
    except MetricError:
        return None


def _eval_items(pred: Path, gt: Path, cfg: Config):
    """Yield (pair_id, pred_img, gt_img, gt_mask or None, pred_flow, gt_flow)."""
    if (gt / "pairs.txt").is_file():
        for i, (_, tgt) in enumerate(io.read_pair_list(gt / "pairs.txt")):
            pid = f"{i:04d}"
            img, _, garment = io.load_sample(tgt, cfg.data.num_parts, cfg.data.num_garments)
            p_img = io.load_image(pred / f"{pid}.png")
            mask = ~np.isin(garment.indices(), list(IDENTITY_CLASSES))
            pf, gf = pred / f"{pid}.pflow", gt / "flows" / f"{pid}.pflow"
            flows = (io.load_pyramid(pf)[0], io.load_pyramid(gf)[0]) if pf.is_file() and gf.is_file() else (None, None)
            yield pid, p_img.data, img.data, mask, *flows
        return
    for g in sorted(gt.glob("*.png")):
        if g.stem.endswith(("_pose", "_uv", "_parse", "_grid")):
            continue
        parse = g.with_name(f"{g.stem}_parse.png")
        mask = ~np.isin(io.load_index_png(parse), list(IDENTITY_CLASSES)) if parse.is_file() else None
        pf, gf = pred / f"{g.stem}.pflow", gt / f"{g.stem}.pflow"
        flows = (io.load_pyramid(pf)[0], io.load_pyramid(gf)[0]) if pf.is_file() and gf.is_file() else (None, None)
        yield g.stem, io.load_image(pred / g.name).data, io.load_image(g).data, mask, *flows


def evaluate(pred, gt, cfg: Config = None) -> list:
    cfg = cfg or Config()
    rows = []
    for pid, p, g, mask, pf, gf in _eval_items(Path(pred), Path(gt), cfg):
        row = {"pair_id": pid, "ssim": ssim(p, g), "ms_ssim": _try(ms_ssim, p, g)}
        has_mask = mask is not None and mask.any()
        row["masked_ssim"] = masked_metric(ssim, p, g, mask) if has_mask else None
        row["masked_ms_ssim"] = _try(masked_metric, ms_ssim, p, g, mask) if has_mask else None
        row["epe"] = epe(pf, gf) if pf is not None else None
        rows.append(row)
    return rows


def write_eval_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in rows:
            w.writerow(["" if r[c] is None else (r[c] if c == "pair_id" else f"{r[c]:.6f}") for c in EVAL_COLUMNS])


def cmd_eval(args, extra):
    cfg = _config(args, extra)
    rows = evaluate(args.pred, args.gt, cfg)
    out = Path(args.out) if args.out else Path(args.pred) / "eval.csv"
    write_eval_csv(rows, out)
    if rows:
        log.info("mean ssim %.4f over %d pairs -> %s", np.mean([r["ssim"] for r in rows]), len(rows), out)


def cmd_gradcheck(args, extra):
    from .gradcheck import run_suite

    results = run_suite(args.seed, args.quick)
    for r in results:
        print(r.line())
    worst = max(r.max_error / r.tolerance for r in results)
    print(f"max error / tolerance: {worst:.3e}")
    return 0 if all(r.passed for r in results) else EXIT_FAIL


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="poseflow", description=__doc__.splitlines()[0],
                                 epilog="config keys: " + ", ".join(config_keys()))
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toydata", help="write a synthetic pair dataset with ground-truth flows")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(fn=cmd_toydata)

    def common(p, *ckpts, run=True):
        p.add_argument("--config", help="YAML/JSON config file")
        p.add_argument("--data", required=True, help="dataset directory (with pairs.txt) or pair-list file")
        if run:
            p.add_argument("--run", required=True, help="run directory")
        for c in ckpts:
            p.add_argument(f"--{c}", help=f"{c} checkpoint (.pfck)")
        p.add_argument("--samples", type=int, default=4, help="pairs to render into samples/")

    p = sub.add_parser("flow-train", help="stage I: unsupervised flow estimator")
    common(p)
    p.set_defaults(fn=cmd_flow_train)
    p = sub.add_parser("garment-train", help="stage II: GarmentNet (needs a flow checkpoint)")
    common(p, "flow")
    p.set_defaults(fn=cmd_garment_train)
    p = sub.add_parser("synth-train", help="stage II: SynthesisNet (needs flow and garment checkpoints)")
    common(p, "flow", "garment")
    p.set_defaults(fn=cmd_synth_train)
    p = sub.add_parser("infer", help="synthesize targets and side-by-side grids")
    common(p, "flow", "garment", "synthesis")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="SSIM / MS-SSIM / masked variants / EPE to CSV")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true")
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args, extra = build_parser().parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.fn(args, extra) or 0
    except MissingCheckpoint as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (io.CheckpointError, ValidationError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
