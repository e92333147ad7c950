"""Command-line entry point: datagen / train / render / bench / serve.

Flags override a key=value config file (--config), which overrides
built-in defaults. Angles on the command line are degrees. Exit codes:
0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import datagen, fileio, training
from .network import RenderModel, Settings, UNetConfig
from .projection import PointCloud, ZBufferParams, scatter_backends
from .render import CameraSpec, Renderer


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parse_floats(text: str, count: int, what: str, allow_fewer: bool = False) -> list[float]:
    parts = [p for p in text.split(",") if p != ""]
    if len(parts) != count and not (allow_fewer and 1 <= len(parts) <= count):
        raise _UsageError(f"{what} expects {count} comma-separated values, got {text!r}")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise _UsageError(f"{what}: non-numeric value in {text!r}") from None


def _read_config_file(path: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise _UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _convert_like(raw: str, current):
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def _overlay_config(args: argparse.Namespace, defaults: dict, config: dict[str, str]) -> None:
    # flag > config file > default: config only replaces untouched defaults
    for key, raw in config.items():
        if key not in vars(args):
            print(f"warning: config key {key!r} does not match any flag", file=sys.stderr)
            continue
        if getattr(args, key) == defaults.get(key):
            setattr(args, key, _convert_like(raw, defaults.get(key)))


def build_parser() -> _Parser:
    parser = _Parser(prog="pointshade", description=__doc__)
    parser.add_argument("--config", help="key=value file overlaying flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a training dataset")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0, help="uniform-noise point fraction")
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--material", action="store_true", help="sample metallic/roughness controls")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--mode", choices=("adain", "append"), default="adain")
    p.add_argument("--no-encoding", action="store_true")
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--base-channels", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--w-mse", type=float, default=1.0)
    p.add_argument("--w-mag", type=float, default=1.0)
    p.add_argument("--w-alpha", type=float, default=1.0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--loss-csv", default=None, help="default: <out>.losses.csv")
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--out", required=True)

    p = sub.add_parser("render", help="render a point cloud to PNG")
    p.add_argument("--model", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--color", default="0.7,0.7,0.7", help="r,g,b in [0,1]")
    p.add_argument("--light", default="45,35,4", help="azimuth_deg,elevation_deg,radius")
    p.add_argument("--material", default=None, help="metallic,roughness in [0,1]")
    p.add_argument("--camera", default="0", help="yaw_deg[,pitch_deg[,distance]]")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--backend", choices=("auto", "compiled", "python"), default="auto")
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="per-stage timing benchmark, compiled vs python kernels")
    p.add_argument("--points", type=int, default=5000)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--repeat", type=int, default=11)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path; default stdout")

    p = sub.add_parser("serve", help="start the local render service")
    p.add_argument("--model", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--static-dir", default=None, help="viewer assets to serve at /")
    return parser


# ---------------------------------------------------------------------------

def cmd_datagen(args) -> int:
    if args.resolution % 16:
        print(
            f"warning: resolution {args.resolution} is not divisible by 16; "
            "the default 4-level network will reject it",
            file=sys.stderr,
        )
    config = datagen.DatagenConfig(
        points=args.points,
        noise_fraction=args.noise,
        material_control=args.material,
    )
    names = datagen.save_dataset(args.out_dir, args.count, args.resolution, config, args.seed)
    print(f"wrote {len(names)} samples to {args.out_dir}")
    return 0


def cmd_train(args) -> int:
    triples, manifest = datagen.load_dataset(args.data)
    material = bool(manifest["config"].get("material_control", False))
    config = UNetConfig(
        levels=args.levels,
        base_channels=args.base_channels,
        settings_mode="adain" if args.mode == "adain" else "feature_append",
        encoding_enabled=not args.no_encoding,
        settings_length=8 if material else 6,
    )
    model = RenderModel(config, init_seed=args.init_seed)
    weights = training.LossWeights(args.w_mse, args.w_mag, args.w_alpha)
    train_cfg = training.TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        steps=args.steps,
        seed=args.seed,
        weights=weights,
        checkpoint_every=args.checkpoint_every,
    )
    zb = manifest["config"]["zbuffer"]
    zparams = ZBufferParams(alpha=zb["alpha"], beta=zb["beta"], window=zb["window"])
    camera = {
        "pitch": manifest["config"]["camera_pitch"],
        "distance": manifest["config"]["camera_distance"],
        "focal_factor": manifest["config"]["focal_factor"],
    }

    def save(step_count: int, history) -> None:
        provenance = {
            "train_seed": args.seed,
            "init_seed": args.init_seed,
            "steps": step_count,
            "loss": history[-1].total if history else None,
            "dataset": str(args.data),
            "mode": config.settings_mode,
            "encoding_enabled": config.encoding_enabled,
        }
        bundle = fileio.bundle_from_model(model, zparams=zparams, camera=camera, provenance=provenance)
        fileio.save_model(bundle, args.out)

    history: list[training.LossRecord] = []

    def log(rec: training.LossRecord) -> None:
        if args.log_every and (rec.step % args.log_every == 0 or rec.step == args.steps - 1):
            print(
                f"step {rec.step}: total={rec.total:.5f} mse={rec.mse_rgb:.5f} "
                f"mag={rec.l1_mag:.5f} alpha={rec.l1_alpha:.5f}"
            )

    def checkpoint(step: int, _model) -> None:
        save(step + 1, history)

    history = training.train(triples, train_cfg, model, checkpoint=checkpoint, log=log)
    save(args.steps, history)
    loss_csv = args.loss_csv or (str(args.out) + ".losses.csv")
    training.write_loss_csv(history, loss_csv)
    if history:
        print(f"final loss {history[-1].total:.5f} (initial {history[0].total:.5f})")
    print(f"saved model to {args.out}, losses to {loss_csv}")
    return 0


def _settings_from_args(args, settings_length: int) -> Settings:
    color = _parse_floats(args.color, 3, "--color")
    if min(color) < 0.0 or max(color) > 1.0:
        raise _UsageError("--color components must lie in [0, 1]")
    az_deg, el_deg, radius = _parse_floats(args.light, 3, "--light")
    material = None
    if args.material is not None:
        m, r = _parse_floats(args.material, 2, "--material")
        material = (m, r)
    if settings_length == 8 and material is None:
        raise _UsageError("model expects --material metallic,roughness")
    if settings_length == 6 and material is not None:
        raise _UsageError("model was trained without material control")
    return Settings(
        color=tuple(color),
        light=(math.radians(az_deg), math.radians(el_deg), radius),
        material=material,
    )


def cmd_render(args) -> int:
    renderer = Renderer.from_file(args.model)
    cloud = fileio.read_point_cloud(args.cloud)
    settings = _settings_from_args(args, renderer.model.config.settings_length)
    cam_vals = _parse_floats(args.camera, 3, "--camera", allow_fewer=True)
    camera = CameraSpec(
        yaw=math.radians(cam_vals[0]),
        pitch=math.radians(cam_vals[1]) if len(cam_vals) > 1 else None,
        distance=cam_vals[2] if len(cam_vals) > 2 else None,
    )
    rgba, timings = renderer.render(cloud, settings, args.resolution, camera, backend=args.backend)
    fileio.write_png_rgba(rgba, args.out)
    print(f"project_ms={timings.project_ms:.3f}")
    print(f"zbuffer_ms={timings.zbuffer_ms:.3f}")
    print(f"forward_ms={timings.forward_ms:.3f}")
    print(f"total_ms={timings.total_ms:.3f}")
    print(f"wrote {args.out}")
    return 0


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    dirs = rng.normal(size=(args.points, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    cloud = PointCloud(dirs * rng.uniform(0.5, 1.0, (args.points, 1)))
    model = RenderModel(UNetConfig(levels=2, base_channels=8), init_seed=args.seed)
    renderer = Renderer(model)
    settings = Settings(color=(0.7, 0.3, 0.2), light=(0.8, 0.6, 4.0))

    rows = []
    for impl, available in scatter_backends().items():
        if not available:
            continue
        stages: dict[str, list[float]] = {"project_ms": [], "zbuffer_ms": [], "forward_ms": []}
        for _ in range(max(1, args.repeat)):
            _, t = renderer.render(cloud, settings, args.resolution, backend=impl)
            stages["project_ms"].append(t.project_ms)
            stages["zbuffer_ms"].append(t.zbuffer_ms)
            stages["forward_ms"].append(t.forward_ms)
        med = {k: statistics.median(v) for k, v in stages.items()}
        med["total_ms"] = sum(med.values())
        rows.append({"impl": impl, **med})

    fields = ["impl", "project_ms", "zbuffer_ms", "forward_ms", "total_ms"]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.3f}" if isinstance(v, float) else v) for k, v in row.items()})
    finally:
        if args.out:
            out.close()
    return 0


def cmd_serve(args) -> int:
    from . import service

    renderer = Renderer.from_file(args.model)
    service.serve_forever(renderer, args.host, args.port, static_dir=args.static_dir)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            defaults = {
                action.dest: action.default
                for action in parser._subparsers._group_actions[0].choices[args.command]._actions
            }
            _overlay_config(args, defaults, _read_config_file(args.config))
        handler = {
            "datagen": cmd_datagen,
            "train": cmd_train,
            "render": cmd_render,
            "bench": cmd_bench,
            "serve": cmd_serve,
        }[args.command]
        return handler(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # runtime failure contract: exit 2 with message
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
