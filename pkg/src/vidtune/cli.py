"""Command-line entry point.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines whose
keys are the long flag names (dashes or underscores); flags given on the
command line win.  Each run writes ``manifest.json`` (command, resolved
configuration, seeds, library versions) next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attention import DotProductCounter
from .checkpoint import load_tensor_file
from .errors import ConfigurationError, ContractError, VidtuneError
from .sampler import SampleRequest, SampleResult, extend_video_autoregressive, sample_video
from .tuner import TrainingConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("vidtune")


# -- config file and manifest ---------------------------------------------------------


def read_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, text in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise ConfigurationError(f"unknown config key {key!r} for '{parser.prog}'")
        if isinstance(action, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
            defaults[key] = text.lower() in ("1", "true", "yes", "on")
        elif action.nargs in ("+", "*"):
            conv = action.type or str
            defaults[key] = [conv(v) for v in text.replace(",", " ").split()]
        else:
            defaults[key] = (action.type or str)(text)
    for key in defaults:
        actions[key].required = False
    parser.set_defaults(**defaults)


def _versions() -> dict[str, str]:
    import matplotlib

    return {"vidtune": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "matplotlib": matplotlib.__version__}


def write_manifest(out_dir, args: argparse.Namespace, seeds: dict, extra: dict | None = None) -> Path:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    manifest = {"command": args.command, "config": cfg, "seeds": seeds, "versions": _versions(),
                "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
    manifest.update(extra or {})
    path = Path(out_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _write_rows(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _plot_losses(losses, path, title) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    losses = np.asarray(losses)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(1, len(losses) + 1), losses, lw=0.6, alpha=0.5, label="loss")
    k = max(1, len(losses) // 20)
    if len(losses) >= k:
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax.plot(np.arange(k, len(losses) + 1), smooth, lw=1.5, label=f"mean of {k}")
    ax.set(xlabel="step", ylabel="eps loss", title=title, yscale="log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def _save_losses(losses, out_dir, title):
    _write_rows(Path(out_dir) / "losses.csv", ["step", "loss"], [(i + 1, repr(float(v))) for i, v in enumerate(losses)])
    _plot_losses(losses, Path(out_dir) / "losses.png", title)


def _progress(every):
    def cb(step, loss):
        if step % every == 0:
            log.info("step %d loss %.5f", step, loss)

    return cb


# -- subcommands ---------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    from .harness.pretrain import PretrainConfig, pretrain_toy_t2i
    from .harness.synthetic import still_corpus
    from .unet import UNetConfig

    out = Path(args.out)
    images, captions = still_corpus(args.corpus_size, args.resolution, seed=args.corpus_seed)
    ucfg = UNetConfig(base_width=args.base_width, d_cond=args.d_cond, latent_factor=args.latent_factor,
                      seed=args.seed)
    cfg = PretrainConfig(steps=args.steps, batch=args.batch, lr=args.lr, seed=args.seed, T=args.T, unet=ucfg)
    ck = pretrain_toy_t2i(images, captions, cfg, callback=_progress(args.log_every))
    save_checkpoint(ck, out / "t2i.ckpt")
    _save_losses(ck.losses, out, "toy text-to-image pretraining")
    write_manifest(out, args, {"train": args.seed, "corpus": args.corpus_seed})
    log.info("wrote %s", out / "t2i.ckpt")
    return 0


def _load_clip(args):
    from .harness.export import read_ppm
    from .harness.synthetic import SyntheticSceneSpec, VideoClip, generate_synthetic_clip

    if args.clip_dir:
        d = Path(args.clip_dir)
        files = sorted(d.glob("frame_*.ppm"))
        if not files:
            raise ContractError(f"no frame_*.ppm files in {d}")
        cap = d / "caption.txt"
        caption = cap.read_text().split() if cap.exists() else []
        return VideoClip(np.stack([read_ppm(f) for f in files]), caption)
    spec = SyntheticSceneSpec(args.shape, args.color, args.background, (args.dx, args.dy), args.size)
    return generate_synthetic_clip(spec, args.frames, args.resolution, seed=args.clip_seed)


def cmd_tune(args) -> int:
    from .harness.export import export_frames
    from .harness.pipeline import tune_clip
    from .harness.pretrain import text_encoder_from

    out = Path(args.out)
    ckpt = load_checkpoint(args.checkpoint)
    clip = _load_clip(args)
    if args.caption:
        clip.caption = args.caption.split()
    cfg = TrainingConfig(steps=args.steps, lr=args.lr, frames=clip.frames.shape[0],
                         resolution=clip.frames.shape[-1], seed=args.seed, p_uncond=args.p_uncond)
    _, tuned = tune_clip(ckpt, clip, cfg, args.attention, text_encoder_from(ckpt), _progress(args.log_every))
    save_checkpoint(tuned, out / "tuned.ckpt")
    export_frames(clip.frames, out / "clip")
    (out / "clip" / "caption.txt").write_text(" ".join(clip.caption) + "\n")
    _save_losses(tuned.losses, out, f"one-shot tuning ({args.attention})")
    write_manifest(out, args, {"train": args.seed, "clip": args.clip_seed})
    log.info("wrote %s", out / "tuned.ckpt")
    return 0


def _network_and_text(path, attention):
    from .harness.pipeline import inflate_checkpoint
    from .harness.pretrain import text_encoder_from

    ckpt = load_checkpoint(path)
    if ckpt.unet_config.video:
        net = ckpt.build_network()
        if attention:
            net.attention_kind = attention
    else:
        net = inflate_checkpoint(ckpt, attention or "sparse_causal")
    return net, text_encoder_from(ckpt)


def _write_sample(result: SampleResult, out: Path, args, extra=None) -> None:
    from .harness.export import export_frames
    from .harness.metrics import dominant_hue, frame_consistency_score, mean_displacement
    from .checkpoint import save_tensor_file, TensorFile

    export_frames(result.frames, out)
    tf = TensorFile(meta={"timesteps": result.timesteps, "seed": result.request.seed,
                          "frames": result.request.frames})
    for k, x in enumerate(result.trajectory):
        tf.tensors[f"step_{k:04d}"] = x
        tf.tags[f"step_{k:04d}"] = "LATENT"
    save_tensor_file(tf, out / "trajectory.bin")
    row = [result.frames.shape[0], result.dot_products]
    if result.frames.shape[0] >= 2 and result.frames.shape[-1] % 8 == 0:
        d = mean_displacement(result.frames)
        row += [frame_consistency_score(result.frames), d[0], d[1], dominant_hue(result.frames)]
    else:
        row += ["", "", "", ""]
    _write_rows(out / "metrics.csv", ["frames", "dot_products", "consistency", "dx", "dy", "hue"], [row])
    write_manifest(out, args, {"sample": result.request.seed}, extra)


def cmd_sample(args) -> int:
    out = Path(args.out)
    net, text = _network_and_text(args.checkpoint, args.attention)
    emb = text.encode(args.prompt)
    req = SampleRequest(emb, frames=args.frames, guidance=args.guidance, steps=args.steps, eta=args.eta,
                        seed=args.seed, resolution=args.resolution, clip_x0=args.clip_x0)
    counter = DotProductCounter()
    result = sample_video(net, req, counter=counter)
    _write_sample(result, out, args, {"checkpoint": str(args.checkpoint)})
    log.info("wrote %d frames to %s", result.frames.shape[0], out)
    return 0


def cmd_extend(args) -> int:
    run = Path(args.run_dir)
    manifest = json.loads((run / "manifest.json").read_text())
    prev = manifest["config"]
    ckpt_path = args.checkpoint or manifest.get("checkpoint") or prev.get("checkpoint")
    if not ckpt_path:
        raise ContractError(f"{run} does not name a checkpoint; pass --checkpoint")
    traj_path = run / "trajectory.bin"
    if not traj_path.exists():
        raise ContractError(f"{run} has no stored latent trajectory (trajectory.bin)")
    tf = load_tensor_file(traj_path)
    traj = [tf.tensors[k] for k in sorted(tf.tensors)]
    net, text = _network_and_text(ckpt_path, prev.get("attention"))
    factor = net.config.latent_factor
    req = SampleRequest(text.encode(prev["prompt"]), frames=traj[0].shape[1], guidance=prev["guidance"],
                        steps=prev["steps"], eta=prev["eta"], seed=prev["seed"],
                        resolution=traj[0].shape[-1] * factor, clip_x0=bool(prev.get("clip_x0", False)))
    from .tuner import from_latent

    prefix = SampleResult(from_latent(traj[-1], factor).transpose(1, 0, 2, 3), traj[-1], traj,
                          list(tf.meta["timesteps"]), req)
    counter = DotProductCounter()
    result = extend_video_autoregressive(net, prefix, args.k, counter=counter)
    for key in ("prompt", "guidance", "steps", "eta", "seed", "attention", "clip_x0"):
        setattr(args, key, prev.get(key))
    _write_sample(result, Path(args.out), args,
                  {"checkpoint": str(ckpt_path), "prefix_run": str(run), "prefix_deviation": result.prefix_deviation})
    log.info("extended %d -> %d frames (prefix deviation %g)", len(prefix.frames), len(result.frames),
             result.prefix_deviation)
    return 0


def cmd_bench(args) -> int:
    from .harness.bench import plot_benchmark, run_benchmark, time_ratios, write_csv

    out = Path(args.out)
    rows = run_benchmark(args.kinds, args.m, args.N, args.repetitions, args.d_model, args.seed)
    write_csv(rows, out / "bench.csv")
    plot_benchmark(rows, out / "bench.png")
    write_manifest(out, args, {"bench": args.seed})
    for n in args.N:
        if "full" in args.kinds and "sparse_causal" in args.kinds:
            r = ", ".join(f"m={m}: {v:.2f}" for m, v in time_ratios(rows, "full", "sparse_causal", n))
            print(f"N={n} time(full)/time(sparse_causal): {r}")
    print(f"{len(rows)} rows, all counts equal their closed forms; wrote {out / 'bench.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import run_suite

    modules = ["tensor", "attention", "unet"] if args.module == "all" else [args.module]
    rows, failed = [], 0
    for mod in modules:
        res = run_suite(mod, range(args.seeds), rtol=args.rtol, atol=args.atol, max_entries=args.max_entries)
        for name, reps in res.items():
            ok = all(r.passed for r in reps)
            failed += not ok
            worst = max(r.max_rel_error for r in reps)
            rows.append((mod, name, len(reps), "PASS" if ok else "FAIL", worst))
            print(f"{'PASS' if ok else 'FAIL'} {mod}/{name}: {len(reps)} seeds, max rel err {worst:.2e}")
    if args.out:
        _write_rows(Path(args.out) / "gradcheck.csv", ["module", "case", "seeds", "status", "max_rel_err"], rows)
        write_manifest(args.out, args, {"seeds": list(range(args.seeds))})
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    from .harness.export import contact_sheet, export_frames
    from .harness.pipeline import run_ablation
    from .harness.synthetic import SyntheticSceneSpec

    out = Path(args.out)
    ckpt = load_checkpoint(args.checkpoint)
    spec = SyntheticSceneSpec(args.shape, args.color, args.background, (args.dx, args.dy), args.size)
    cfg = TrainingConfig(steps=args.tune_steps, lr=args.lr, frames=args.frames, resolution=args.resolution,
                         seed=args.train_seed)
    res = run_ablation(ckpt, spec, args.prompt.split(), cfg, args.seeds, args.guidance, args.steps,
                       args.clip_seed, log=log.info, clip_x0=args.clip_x0)
    _write_rows(out / "ablation.csv", ["variant", "seed", "consistency", "dx", "dy", "hue"],
                [list(s.row().values()) for s in res.scores])
    verdicts = res.verdicts(args.target_hue)
    _write_rows(out / "verdicts.csv", ["seed", "consistency", "motion", "hue"],
                [(s, v["consistency"], v["motion"], v["hue"]) for s, v in verdicts.items()])
    export_frames(res.train_clip.frames, out / "train_clip")
    for (variant, seed), sample in res.samples.items():
        export_frames(sample.frames, out / f"{variant}_seed{seed}")
    _plot_ablation(res, out / "ablation.png", contact_sheet)
    maj = res.majority(args.target_hue)
    write_manifest(out, args, {"train": args.train_seed, "clip": args.clip_seed, "sample": list(args.seeds)},
                   {"majority": maj})
    for k, v in maj.items():
        print(f"{'PASS' if v else 'FAIL'} {k} (majority over {len(verdicts)} seeds)")
    return 0


def _plot_ablation(res, path, contact_sheet) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    seeds = sorted({s for _, s in res.samples})
    rows = [("training clip", res.train_clip.frames)] + [
        (f"{v} seed {s}", res.samples[(v, s)].frames) for s in seeds for v in ("tuned_sc", "tuned_fi", "untuned_sc")
    ]
    fig, axes = plt.subplots(len(rows), 1, figsize=(8, 1.2 * len(rows)))
    for ax, (label, frames) in zip(np.atleast_1d(axes), rows):
        ax.imshow(np.clip(contact_sheet(frames).transpose(1, 2, 0), 0, 1), interpolation="nearest")
        ax.set_ylabel(label, rotation=0, ha="right", va="center", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# -- parser --------------------------------------------------------------------------


def _clip_flags(p):
    p.add_argument("--shape", default="square")
    p.add_argument("--color", default="red")
    p.add_argument("--background", default="white")
    p.add_argument("--dx", type=int, default=2)
    p.add_argument("--dy", type=int, default=0)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--clip-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidtune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the toy 2D text-to-image model on rendered stills")
    p.add_argument("--corpus-size", type=int, default=512)
    p.add_argument("--corpus-seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--base-width", type=int, default=32)
    p.add_argument("--d-cond", type=int, default=32)
    p.add_argument("--latent-factor", type=int, default=2, help="pixels per latent cell (1 = identity latents)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("tune", help="one-shot tuning of the inflated network on one clip")
    p.add_argument("--checkpoint", required=True, help="pretrained 2D checkpoint")
    p.add_argument("--clip-dir", help="directory of frame_*.ppm (+ caption.txt) instead of a synthetic clip")
    p.add_argument("--caption", help="override the clip caption (space-separated tokens)")
    _clip_flags(p)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=3e-5)
    p.add_argument("--p-uncond", type=float, default=0.1)
    p.add_argument("--attention", default="sparse_causal")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("sample", help="guided DDIM text-to-video sampling")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", "--w", type=float, default=7.5)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--attention", default=None, help="override the network's self-attention kind")
    p.add_argument("--clip-x0", action=argparse.BooleanOptionalAction, default=True,
                   help="clip the predicted clean latent to [-1, 1] at each step")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("extend", help="append frames to a sampled run")
    p.add_argument("--run-dir", required=True, help="output directory of a previous sample/extend run")
    p.add_argument("-k", type=int, required=True, help="frames to add")
    p.add_argument("--checkpoint", help="defaults to the checkpoint recorded in the run manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extend)

    p = sub.add_parser("bench", help="attention pair counts and timings")
    p.add_argument("--kinds", nargs="+", default=["frame_individual", "sparse_causal", "causal", "full"])
    p.add_argument("--m", nargs="+", type=int, default=[1, 2, 4, 8, 16])
    p.add_argument("--N", nargs="+", type=int, default=[16, 64])
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", choices=["tensor", "attention", "unet", "all"], default="all")
    p.add_argument("--rtol", type=float, default=1e-4)
    p.add_argument("--atol", type=float, default=1e-8)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--max-entries", type=int, default=None, help="sample this many entries per input")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="attention x tuning ablation on the synthetic clip")
    p.add_argument("--checkpoint", required=True, help="pretrained 2D checkpoint")
    _clip_flags(p)
    p.add_argument("--prompt", default="blue square moving right on white")
    p.add_argument("--target-hue", default="blue")
    p.add_argument("--tune-steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=3e-5)
    p.add_argument("--train-seed", type=int, default=0)
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--clip-x0", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    for sp in sub.choices.values():
        sp.add_argument("--config", help="key = value file; command-line flags override it")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((a for a in argv if a in sub.choices), None)
    config = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif a.startswith("--config="):
            config = a.split("=", 1)[1]
    if command and config:
        _apply_config(sub.choices[command], read_config(config))
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except VidtuneError as e:
        print(f"vidtune: error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except VidtuneError as e:
        print(f"vidtune: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
