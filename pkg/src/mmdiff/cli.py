"""Command-line interface.

Subcommands: make-data, train, generate, style, compose, vary, img2img,
interpolate, selftest. Every image-producing command writes the PNG plus a
JSON sidecar holding the fully resolved configuration (seed, prompt,
guidance, checkpoint hash), which is enough to reproduce the file bit for
bit; argv_from_sidecar turns a sidecar back into the argument vector.

Prompt entries follow `text:"..."` / `image:<path>` with an optional
trailing `theta=<real>`, and their order is preserved exactly (the
embedder is causal, so order is meaningful).

Option precedence: command-line flags > config file (`key = value` lines,
`#` comments) > built-in defaults. The MMDIFF_CHECKPOINT_DIR environment
variable supplies the directory for bare checkpoint filenames.

All writes are atomic (temp file + rename); a failing command never
leaves a partial output behind.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import re
import sys
from pathlib import Path

import torch

from . import __version__, tasks
from .checkpoint import CheckpointError
from .data import (
    caption_text,
    image_to_png,
    make_dataset,
    png_to_image,
    tokenize,
)
from .diffusion import (
    DEFAULT_GUIDANCE_SCALE,
    DEFAULT_SAMPLE_STEPS,
    GuidanceParams,
)
from .embedder import ImageElement, MultimodalPrompt, TextElement
from .figures import image_grid, loss_curve
from .model import load_model
from .selfcheck import run_all
from .training import VARIANTS, train

CHECKPOINT_DIR_ENV = "MMDIFF_CHECKPOINT_DIR"
DEFAULTS = {
    "scale": DEFAULT_GUIDANCE_SCALE,
    "steps": DEFAULT_SAMPLE_STEPS,
    "sampler": "pseudo_numerical",
    "seed": 0,
    "count": 1,
    "checkpoint": "model.ckpt",
}


class CliError(Exception):
    pass


# -- option resolution --------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    """Flat `key = value` file; blank lines and # comments ignored."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _resolve(args, key: str, cast, file_values: dict):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in file_values:
        try:
            return cast(file_values[key])
        except ValueError as e:
            raise CliError(f"config file value for {key!r}: {e}") from e
    return DEFAULTS.get(key)


def resolve_checkpoint_path(raw: str) -> Path:
    # test the raw string, not Path.parts: Path("./m.ckpt") normalizes to a
    # single part and would wrongly count as bare
    env_dir = os.environ.get(CHECKPOINT_DIR_ENV)
    if env_dir and os.sep not in raw:
        return Path(env_dir) / raw
    return Path(raw)


# -- prompt grammar -------------------------------------------------------------

_THETA_RE = re.compile(r"\s+theta=([^\s]+)\s*$")


def parse_prompt_entry(entry: str) -> dict:
    """`text:"..."` or `image:<path>`, optional trailing `theta=<real>`."""
    theta = 1.0
    m = _THETA_RE.search(entry)
    if m:
        try:
            theta = float(m.group(1))
        except ValueError as e:
            raise CliError(f"bad theta in prompt entry {entry!r}: {e}") from e
        entry = entry[: m.start()]
    if entry.startswith("text:"):
        value = entry[len("text:"):].strip()
        if len(value) >= 2 and value[0] == '"' and value[-1] == '"':
            value = value[1:-1]
        if not value:
            raise CliError("empty text prompt entry")
        return {"kind": "text", "value": value, "theta": theta}
    if entry.startswith("image:"):
        path = entry[len("image:"):].strip()
        if not path:
            raise CliError("empty image prompt entry")
        return {"kind": "image", "path": path, "theta": theta}
    raise CliError(f"prompt entry must start with text: or image:, got {entry!r}")


def build_prompt(entries: list[dict], image_tokens: int) -> MultimodalPrompt:
    elements, thetas = [], []
    for e in entries:
        if e["kind"] == "text":
            elements.append(TextElement(tuple(int(i) for i in tokenize(e["value"]))))
        else:
            p = Path(e["path"])
            if not p.exists():
                raise CliError(f"image file not found: {p}")
            elements.append(ImageElement(png_to_image(p)))
        thetas.append(e["theta"])
    return MultimodalPrompt.build(elements, thetas, image_tokens)


# -- sidecars -------------------------------------------------------------------


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def atomic_write_png(image: torch.Tensor, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    image_to_png(image, tmp)
    tmp.replace(path)


def write_sidecar(out_path: Path, payload: dict) -> Path:
    sidecar = out_path.with_suffix(".json")
    tmp = sidecar.with_name(sidecar.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    tmp.replace(sidecar)
    return sidecar


def _sidecar(subcommand, ckpt_path, guidance, seed, out_path, prompt=None, task=None) -> dict:
    payload = {
        "subcommand": subcommand,
        "package_version": __version__,
        "checkpoint": {"path": str(ckpt_path), "sha256": file_sha256(ckpt_path)},
        "guidance": {"scale": guidance.scale, "steps": guidance.steps, "sampler": guidance.sampler},
        "seed": seed,
        "output": {"path": str(out_path), "sha256": file_sha256(out_path)},
    }
    if prompt is not None:
        recorded = []
        for e in prompt:
            r = dict(e)
            if r["kind"] == "image":
                r["sha256"] = file_sha256(r["path"])
            recorded.append(r)
        payload["prompt"] = recorded
    if task:
        payload["task"] = task
    return payload


def argv_from_sidecar(sidecar_path) -> list[str]:
    """Reconstruct the argument vector that reproduces a sidecar's output."""
    sc = json.loads(Path(sidecar_path).read_text())
    g = sc["guidance"]
    argv = [
        sc["subcommand"],
        "--checkpoint", sc["checkpoint"]["path"],
        "--scale", repr(g["scale"]),
        "--steps", str(g["steps"]),
        "--sampler", g["sampler"],
        "--seed", str(sc["seed"]),
        "--out", sc["output"]["path"],
    ]
    task = sc.get("task", {})
    if sc["subcommand"] in ("generate", "compose"):
        argv.append("--prompt")
        for e in sc["prompt"]:
            body = f'text:"{e["value"]}"' if e["kind"] == "text" else f'image:{e["path"]}'
            if e["theta"] != 1.0:
                body += f' theta={e["theta"]!r}'
            argv.append(body)
    if sc["subcommand"] == "style":
        argv += ["--text", task["instruction"], "--image", task["image"], "--rho", repr(task["rho"])]
    if sc["subcommand"] == "vary":
        argv += ["--image", task["image"]]
    if sc["subcommand"] == "img2img":
        argv += ["--image", task["image"], "--strength", repr(task["strength"])]
        if task.get("text") is not None:
            argv += ["--text", task["text"]]
    if sc["subcommand"] == "interpolate":
        for p in task["images"]:
            argv += ["--image", p]
        argv += ["--weights", ",".join(repr(w) for w in task["weights"]),
                 "--strength", repr(task["strength"])]
    return argv


# -- argument parsing -----------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, with_prompt=False) -> None:
    p.add_argument("--checkpoint", help="checkpoint file (bare names resolve "
                   f"against ${CHECKPOINT_DIR_ENV})")
    p.add_argument("--config", help="key = value config file; flags win over it")
    p.add_argument("--scale", type=float, help="guidance scale (default 8.0)")
    p.add_argument("--steps", type=int, help="sampler steps (default 50)")
    p.add_argument("--sampler", choices=("ddpm", "pseudo_numerical"))
    p.add_argument("--seed", type=int, help="base random seed (default 0)")
    p.add_argument("--out", "-o", default="out.png", help="output image path")
    p.add_argument("--count", type=int, help="render this many consecutive seeds")
    if with_prompt:
        p.add_argument("--prompt", nargs="+", required=True, metavar="ENTRY",
                       help='ordered entries: text:"..." or image:PATH, '
                            "optional trailing theta=R")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmdiff",
        description="multimodal-conditioned diffusion on synthetic shape scenes",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("make-data", help="write sample images, captions CSV, preview sheet")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="data")

    p = sub.add_parser("train", help="train a variant and save checkpoint + log + loss curve")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="V1")
    p.add_argument("--size", type=int, default=10_000, help="synthetic dataset size")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, help="override variant iteration count")
    p.add_argument("--warmup-iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", "-o", default="model.ckpt")
    p.add_argument("--log", help="training log CSV (default: alongside checkpoint)")

    _add_common(sub.add_parser("generate", help="sample from a multimodal prompt"), with_prompt=True)
    _add_common(sub.add_parser("compose", help="combine two image prompts"), with_prompt=True)

    p = sub.add_parser("style", help="re-style an image per a text instruction")
    _add_common(p)
    p.add_argument("--text", required=True, help="instruction text")
    p.add_argument("--image", required=True, help="source image PNG")
    p.add_argument("--rho", type=float, default=tasks.DEFAULT_STYLE_RHO,
                   help="attention factor on the image tokens, in [0, 1]")

    p = sub.add_parser("vary", help="sample a variation of an image")
    _add_common(p)
    p.add_argument("--image", required=True)

    p = sub.add_parser("img2img", help="strength-based image-to-image baseline")
    _add_common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--text", help="optional text condition")
    p.add_argument("--strength", type=float, default=0.5)

    p = sub.add_parser("interpolate", help="noised-latent convex combination baseline")
    _add_common(p)
    p.add_argument("--image", action="append", required=True,
                   help="repeat once per input image")
    p.add_argument("--weights", required=True, help="comma-separated convex weights")
    p.add_argument("--strength", type=float, default=0.5)

    sub.add_parser("selftest", help="run the invariant battery; nonzero exit on failure")
    return parser


# -- command implementations -----------------------------------------------------


def _load_checkpoint_model(args, file_values):
    raw = _resolve(args, "checkpoint", str, file_values)
    path = resolve_checkpoint_path(raw)
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}")
    try:
        model, _ = load_model(path)
    except CheckpointError as e:
        raise CliError(f"cannot load checkpoint {path}: {e}") from e
    model.eval()
    return model, path


def _guidance(args, file_values) -> GuidanceParams:
    return GuidanceParams(
        scale=_resolve(args, "scale", float, file_values),
        steps=_resolve(args, "steps", int, file_values),
        sampler=_resolve(args, "sampler", str, file_values),
    )


def _out_paths(base: str, seeds: list[int]) -> list[Path]:
    base = Path(base)
    if len(seeds) == 1:
        return [base]
    return [base.with_name(f"{base.stem}-s{s}{base.suffix or '.png'}") for s in seeds]


def _run_image_command(args, render_one, prompt_entries=None, task_info=None) -> int:
    """Shared flow: resolve options, render per seed, write PNG + sidecar."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    model, ckpt_path = _load_checkpoint_model(args, file_values)
    guidance = _guidance(args, file_values)
    seed = _resolve(args, "seed", int, file_values)
    count = _resolve(args, "count", int, file_values)
    seeds = [seed + i for i in range(count)]
    outs = _out_paths(args.out, seeds)
    images = []
    for s, out in zip(seeds, outs):
        img = render_one(model, guidance, s)
        atomic_write_png(img, out)
        write_sidecar(out, _sidecar(args.subcommand, ckpt_path, guidance, s, out,
                                    prompt=prompt_entries, task=task_info))
        images.append(img)
        print(out)
    if len(images) > 1:
        sheet = Path(args.out).with_name(Path(args.out).stem + "-sheet.png")
        image_grid(images, sheet, titles=[f"seed {s}" for s in seeds])
        print(sheet)
    return 0


def cmd_generate(args) -> int:
    entries = [parse_prompt_entry(e) for e in args.prompt]

    def render(model, guidance, seed):
        prompt = build_prompt(entries, model.decoder_config.image_tokens)
        return tasks.generate(model, tasks.GenerationRequest(
            prompt=prompt, guidance=guidance, seed=seed))

    return _run_image_command(args, render, prompt_entries=entries)


def cmd_compose(args) -> int:
    entries = [parse_prompt_entry(e) for e in args.prompt]
    if len(entries) != 2 or any(e["kind"] != "image" for e in entries):
        raise CliError("compose needs exactly two image:... prompt entries")

    def render(model, guidance, seed):
        return tasks.compose(
            model,
            png_to_image(entries[0]["path"]), png_to_image(entries[1]["path"]),
            theta1=entries[0]["theta"], theta2=entries[1]["theta"],
            guidance=guidance, seed=seed,
        )

    return _run_image_command(args, render, prompt_entries=entries)


def cmd_style(args) -> int:
    if not Path(args.image).exists():
        raise CliError(f"image file not found: {args.image}")

    def render(model, guidance, seed):
        return tasks.style_modify(model, args.text, png_to_image(args.image),
                                  rho=args.rho, guidance=guidance, seed=seed)

    return _run_image_command(
        args, render,
        task_info={"instruction": args.text, "image": args.image,
                   "image_sha256": file_sha256(args.image), "rho": args.rho},
    )


def cmd_vary(args) -> int:
    if not Path(args.image).exists():
        raise CliError(f"image file not found: {args.image}")

    def render(model, guidance, seed):
        return tasks.vary(model, png_to_image(args.image), guidance=guidance, seed=seed)

    return _run_image_command(
        args, render,
        task_info={"image": args.image, "image_sha256": file_sha256(args.image)},
    )


def cmd_img2img(args) -> int:
    if not Path(args.image).exists():
        raise CliError(f"image file not found: {args.image}")

    def render(model, guidance, seed):
        return tasks.img2img_baseline(model, png_to_image(args.image), text=args.text,
                                      strength=args.strength, guidance=guidance, seed=seed)

    return _run_image_command(
        args, render,
        task_info={"image": args.image, "image_sha256": file_sha256(args.image),
                   "text": args.text, "strength": args.strength},
    )


def cmd_interpolate(args) -> int:
    for p in args.image:
        if not Path(p).exists():
            raise CliError(f"image file not found: {p}")
    try:
        weights = [float(w) for w in args.weights.split(",")]
    except ValueError as e:
        raise CliError(f"bad --weights: {e}") from e

    def render(model, guidance, seed):
        return tasks.interpolate_baseline(
            model, [png_to_image(p) for p in args.image], weights,
            strength=args.strength, guidance=guidance, seed=seed,
        )

    return _run_image_command(
        args, render,
        task_info={"images": list(args.image),
                   "image_sha256": [file_sha256(p) for p in args.image],
                   "weights": weights, "strength": args.strength},
    )


def cmd_make_data(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = make_dataset(args.n, args.seed)
    rows = []
    for i, item in enumerate(items):
        name = f"img_{i:05d}.png"
        atomic_write_png(item.image, out_dir / name)
        a = item.attributes
        rows.append([name, caption_text(a), a.color, a.shape, a.background])
    caption_path = out_dir / "captions.csv"
    tmp = caption_path.with_name(caption_path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["file", "caption", "color", "shape", "background"])
        w.writerows(rows)
    tmp.replace(caption_path)
    preview = image_grid([it.image for it in items[:32]], out_dir / "preview.png")
    print(caption_path)
    print(preview)
    return 0


def cmd_train(args) -> int:
    variant = VARIANTS[args.variant]
    overrides = {k: getattr(args, k) for k in ("iterations", "warmup_iterations", "batch_size")
                 if getattr(args, k) is not None}
    if overrides:
        variant = dataclasses.replace(variant, **overrides)
    dataset = make_dataset(args.size, args.data_seed)
    ckpt = Path(args.out)
    log = Path(args.log) if args.log else ckpt.with_suffix(".log.csv")
    _, meta = train(variant, dataset, args.seed,
                    checkpoint_path=ckpt, log_path=log, progress=True)
    curve = loss_curve(log, log.with_suffix(".png"))
    print(ckpt)
    print(log)
    print(curve)
    print(f"trained {meta['variant']} for {meta['step']} steps "
          f"({meta['image_conditions']} image-conditioned elements)")
    return 0


def cmd_selftest(_args) -> int:
    failures = run_all()
    print(f"{failures} failure(s)" if failures else "all checks passed")
    return 1 if failures else 0


def main(argv=None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    handlers = {
        "make-data": cmd_make_data,
        "train": cmd_train,
        "generate": cmd_generate,
        "compose": cmd_compose,
        "style": cmd_style,
        "vary": cmd_vary,
        "img2img": cmd_img2img,
        "interpolate": cmd_interpolate,
        "selftest": cmd_selftest,
    }
    try:
        return handlers[args.subcommand](args)
    except (CliError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
