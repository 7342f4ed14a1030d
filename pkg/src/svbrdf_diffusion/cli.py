"""Command-line entry point: ``svbrdf-diffusion <subcommand> ...``.

Exit codes: 0 on success, 1 on usage errors (bad flags, unparsable prompt),
2 on runtime errors (missing or corrupt files, failing self-test).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that exits with status 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _triple(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return vals


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _unit_float(text: str) -> float:
    v = float(text)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {v}")
    return v


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, but not for required flags and flags without one."""

    def _get_help_string(self, action):
        if action.default is None or action.required:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _Formatter
    p = _Parser(prog="svbrdf-diffusion", description="Text-conditioned SVBRDF diffusion toolkit.",
                formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-dataset", help="write a procedural dataset directory", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--classes", default="all", help="comma-separated class names or 'all'")
    g.add_argument("--per-class", type=_positive_int, default=512, help="samples per class")
    g.add_argument("--size", type=int, default=32, help="map resolution (power of two in [16, 64])")
    g.add_argument("--seed", type=int, default=0, help="dataset seed")
    g.add_argument("--level-prob", type=_unit_float, default=0.0,
                   help="probability of attaching each roughness/specular level clause")
    g.add_argument("--color-prob", type=_unit_float, default=0.0, help="probability of attaching a colour clause")

    t = sub.add_parser("train", help="train a model from a key = value config file", formatter_class=fmt)
    t.add_argument("--config", default=None, help="training config file (defaults apply when omitted)")
    t.add_argument("--out", required=True, help="directory for checkpoints and the TSV log")
    t.add_argument("--dataset", default=None, help="dataset directory (overrides the config)")
    t.add_argument("--steps", type=int, default=None, help="total steps (overrides the config)")
    t.add_argument("--seed", type=int, default=None, help="training seed (overrides the config)")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")

    s = sub.add_parser("sample", help="sample materials for a prompt", formatter_class=fmt)
    s.add_argument("--ckpt", required=True, help="model checkpoint")
    s.add_argument("--prompt", required=True, help="prompt, e.g. 'flat texture of wood, high roughness'")
    s.add_argument("--count", type=_positive_int, default=1, help="number of samples")
    s.add_argument("--steps", type=_positive_int, default=50, help="sampler steps")
    s.add_argument("--seed", type=int, default=0, help="seed of the first sample; sample i uses seed + i")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--latent-from", default=None, help=".svb file whose latent guides sampling")

    r = sub.add_parser("render", help="render a .svb file under a point light", formatter_class=fmt)
    r.add_argument("--svb", required=True, help="input .svb file")
    r.add_argument("--light", type=_triple, default="-1,1,1", help="light position X,Y,Z (Z > 0)")
    r.add_argument("--intensity", type=float, default=1.0, help="light intensity")
    r.add_argument("--size", type=int, default=None, help="output size in pixels (native when omitted)")
    r.add_argument("--exposure", type=float, default=1.0, help="linear exposure multiplier")
    r.add_argument("--gamma", type=float, default=2.2, help="display gamma")
    r.add_argument("--out", required=True, help="output PNG path")

    w = sub.add_parser("sweep", help="render a light sweep from top left to bottom right", formatter_class=fmt)
    w.add_argument("--svb", required=True, help="input .svb file")
    w.add_argument("--frames", type=_positive_int, default=3, help="number of frames")
    w.add_argument("--intensity", type=float, default=1.0, help="light intensity")
    w.add_argument("--out", required=True, help="output directory for numbered PNGs")

    ti = sub.add_parser("tile", help="make a .svb file seamlessly tileable", formatter_class=fmt)
    ti.add_argument("--svb", required=True, help="input .svb file")
    ti.add_argument("--out", required=True, help="output .svb path")

    i = sub.add_parser("inspect", help="print header, channel statistics and scalars", formatter_class=fmt)
    i.add_argument("--svb", required=True, help="input .svb file")

    sub.add_parser("selftest", help="run the fast invariant checks", formatter_class=fmt)
    return p


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_dataset(a) -> int:
    from .dataset import CLASSES, build_dataset

    classes = list(CLASSES) if a.classes == "all" else [c.strip().lower() for c in a.classes.split(",")]
    unknown = [c for c in classes if c not in CLASSES]
    if unknown:
        raise UsageError(f"unknown class {unknown[0]!r}; choose from {', '.join(CLASSES)}")
    try:
        build_dataset(a.out, classes, a.per_class, a.size, a.seed, level_prob=a.level_prob, color_prob=a.color_prob)
    except ValueError as exc:  # size outside the generator contract
        raise UsageError(str(exc)) from None
    print(f"wrote {len(classes) * a.per_class} samples to {a.out}")
    return EXIT_OK


def cmd_train(a) -> int:
    from .trainer import ConfigError, TrainConfig, train

    try:
        cfg = TrainConfig.from_file(a.config) if a.config else TrainConfig()
        over = {"out_dir": a.out, "log_path": None}
        if a.dataset is not None:
            over["dataset"] = a.dataset
        if a.steps is not None:
            over["total_steps"] = a.steps
        if a.seed is not None:
            over["seed"] = a.seed
        cfg = replace(cfg, **over)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    Path(a.out).mkdir(parents=True, exist_ok=True)
    (Path(a.out) / "config.txt").write_text(cfg.to_text(), encoding="utf-8")

    def progress(step, loss):
        if step % 100 == 0 or step == cfg.total_steps:
            print(f"step {step}/{cfg.total_steps} mse {loss:.5f}", flush=True)

    final, log = train(cfg, resume=a.resume, progress=progress)
    print(f"final checkpoint {final}")
    return EXIT_OK


def cmd_sample(a) -> int:
    from .dataset import PromptError, make_latent, parse_prompt
    from .diffusion import euler_sample
    from .renderer import render, save_png
    from .svbrdf import decode, export_png, read_svb, write_svb
    from .unet import as_model, load_checkpoint

    try:
        spec = parse_prompt(a.prompt)
    except PromptError as exc:
        raise UsageError(str(exc)) from None
    params, _ = load_checkpoint(a.ckpt)
    cfg = params.config
    if spec.class_id >= cfg.num_classes:
        raise UsageError(f"class {spec.material_class!r} is outside this model's {cfg.num_classes} classes")
    latent = None
    if a.latent_from:
        guide = read_svb(a.latent_from)
        if guide.shape != (cfg.base_resolution,) * 2:
            raise ValueError(f"--latent-from maps are {guide.shape}, model expects {cfg.base_resolution}")
        latent = make_latent(guide, cfg.latent_channels)
    cond = spec.condition(latent)
    model = as_model(params)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    res = cfg.base_resolution
    for i in range(a.count):
        z = euler_sample(model, [cond], (1, 10, res, res), steps=a.steps, seed=a.seed + i)
        maps = decode(z[0])
        write_svb(maps, out / f"{i}.svb")
        export_png(maps, out / f"{i}_maps")
        save_png(render(maps), out / f"{i}_render.png")
        print(f"wrote {out / f'{i}.svb'}")
    return EXIT_OK


def cmd_render(a) -> int:
    from .renderer import RenderConfig, RenderError, render, save_png
    from .svbrdf import read_svb

    try:
        cfg = RenderConfig(light_position=a.light, light_intensity=a.intensity, output_size=a.size,
                           exposure=a.exposure, gamma=a.gamma)
    except RenderError as exc:
        raise UsageError(str(exc)) from None
    maps = read_svb(a.svb)
    save_png(render(maps, cfg), a.out)
    print(f"wrote {a.out}")
    return EXIT_OK


def cmd_sweep(a) -> int:
    from .renderer import RenderConfig, render_sweep, save_png, sweep_positions
    from .svbrdf import read_svb

    maps = read_svb(a.svb)
    positions = sweep_positions(a.frames)
    frames = render_sweep(maps, positions, RenderConfig(light_intensity=a.intensity))
    out = Path(a.out)
    for k, (img, pos) in enumerate(zip(frames, positions)):
        save_png(img, out / f"frame_{k:03d}.png")
        print(f"frame {k:03d} light ({pos[0]:g}, {pos[1]:g}, {pos[2]:g})")
    return EXIT_OK


def cmd_tile(a) -> int:
    from .svbrdf import read_svb, seam_metric, tile, write_svb

    maps = read_svb(a.svb)
    out = tile(maps)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    write_svb(out, a.out)
    print(f"wrote {a.out} (seam metric {seam_metric(maps):.6f} -> {seam_metric(out):.6f})")
    return EXIT_OK


CHANNEL_NAMES = ("normal.x", "normal.y", "normal.z", "diffuse.r", "diffuse.g", "diffuse.b",
                 "specular.r", "specular.g", "specular.b", "roughness")


def cmd_inspect(a) -> int:
    from .svbrdf import SVB_MAGIC, extract_scalars, read_svb, read_svb_header

    h, w = read_svb_header(a.svb)
    maps = read_svb(a.svb)
    print(f"magic {SVB_MAGIC.decode()}  height {h}  width {w}")
    print(f"{'channel':<12}{'min':>10}{'max':>10}{'mean':>10}")
    for name, c in zip(CHANNEL_NAMES, maps.channels()):
        print(f"{name:<12}{c.min():>10.4f}{c.max():>10.4f}{c.mean(dtype=np.float64):>10.4f}")
    sc = extract_scalars(maps)
    print(f"mean_roughness {sc.mean_roughness:.6f}")
    print(f"mean_specular {sc.mean_specular:.6f}")
    return EXIT_OK


def cmd_selftest(a) -> int:
    from .selftest import run_selftest

    results = run_selftest()
    failed = [r.name for r in results if not r.passed]
    print("selftest: " + ("all checks passed" if not failed else f"FAILED {', '.join(failed)}"))
    return EXIT_OK if not failed else EXIT_RUNTIME


COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "sample": cmd_sample,
    "render": cmd_render,
    "sweep": cmd_sweep,
    "tile": cmd_tile,
    "inspect": cmd_inspect,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0, bad flags exit 1
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
