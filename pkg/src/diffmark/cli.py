"""Command line entry point.

One subcommand per pipeline stage.  Configuration layers, weakest first:
dataclass defaults, the --config JSON file, DIFFMARK_* environment
variables, then explicit flags.  Every run writes its resolved config and
metrics into --out; the exit status is nonzero when a stage misses its
stated training or retention targets.
"""

from __future__ import annotations

import argparse
import sys

from .pipeline import _from_dict, _merge, load_config, run_stage

_STAGE_OF = {
    "make-data": "make_data",
    "train-ae": "train_autoencoder",
    "train-base": "train_base",
    "train-codec": "train_codec",
    "embed": "embed_backdoor",
    "sample": "sample",
    "verify": "verify",
    "attack": "attack",
    "report": "report",
}

# flag, config path, argparse kwargs
_COMMON = [
    ("--seed", "seed", dict(type=int, help="run seed")),
    ("--out", "out_dir", dict(help="output directory")),
]
_DATA = [("--data", "data_dir", dict(help="dataset directory"))]
_AE = [("--ae", "ae_checkpoint", dict(help="autoencoder checkpoint"))]
_CODEC = [("--codec", "codec_checkpoint", dict(help="codec checkpoint"))]
_MESSAGE = [("--message", "message", dict(help="owner message as hex"))]

_OPTIONS: dict[str, list] = {
    "make-data": [
        ("--num-per-class", "num_per_class", dict(type=int, help="images per class")),
    ],
    "train-ae": _DATA,
    "train-base": _DATA + _AE,
    "train-codec": _DATA + _AE,
    "embed": _AE
    + _CODEC
    + _MESSAGE
    + [
        ("--base", "base_checkpoint", dict(help="pretrained base model checkpoint")),
        ("--selector", "backdoor.selector", dict(help="attention subset to train")),
    ],
    "sample": _AE
    + [
        ("--model", "model_checkpoint", dict(help="denoiser checkpoint")),
        ("--num", "sample.num_per_class", dict(type=int, help="images per class")),
        ("--steps", "sample.num_steps", dict(type=int, help="sampler steps")),
        ("--guidance", "sample.guidance_scale", dict(type=float, help="guidance scale")),
        (
            "--triggered",
            "sample.triggered",
            dict(action="store_const", const=True, help="activate the trigger"),
        ),
    ],
    "verify": _AE
    + _CODEC
    + _MESSAGE
    + [
        ("--images", "verify.images_dir", dict(help="directory of images to test")),
        ("--fpr", "verify.fpr", dict(type=float, help="target false positive rate")),
        (
            "--distortion",
            "verify.distortion",
            dict(help="apply kind:param=value,... before extraction"),
        ),
    ],
    "attack": _DATA
    + _AE
    + _CODEC
    + _MESSAGE
    + [
        ("--model", "model_checkpoint", dict(help="model checkpoint to attack")),
        ("--kind", "attack.kind", dict(help="attack kind")),
        ("--rank", "attack.lora.rank", dict(type=int, help="adapter rank")),
        ("--steps", "attack.lora.steps", dict(type=int, help="adapter attack steps")),
    ],
    "report": [],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffmark",
        description="watermark embedding, verification, and attack experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in _OPTIONS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="JSON config file")
        for flag, path, kwargs in _COMMON + options:
            p.add_argument(flag, dest=_dest(path), default=None, **kwargs)
        if command == "report":
            p.add_argument("run_dirs", nargs="+", help="completed run directories")
    return parser


def _dest(path: str) -> str:
    return "cfg__" + path.replace(".", "__")


def _set_path(overrides: dict, path: str, value) -> None:
    node = overrides
    parts = path.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides: dict = {"stage": _STAGE_OF[args.command]}
    for flag, path, _ in _COMMON + _OPTIONS[args.command]:
        value = getattr(args, _dest(path))
        if value is not None:
            _set_path(overrides, path, value)
    if args.command == "report":
        _set_path(overrides, "report.run_dirs", list(args.run_dirs))
    resolved = load_config(args.config).to_dict()
    _merge(resolved, overrides)
    config = _from_dict(resolved)
    summary = run_stage(config)
    for key in sorted(summary):
        print(f"{key}: {summary[key]}")
    return 1 if summary.get("meets_targets") is False else 0


if __name__ == "__main__":
    sys.exit(main())
