"""Single-stage experiment runner.

Every invocation runs exactly one stage into one output directory:

    out_dir/
      config.json       the full resolved configuration, as used
      metrics.jsonl     one JSON object per line, sorted keys, no timestamps
      checkpoints/      model files written by the stage
      dataset/          only for the data-generation stage
      samples/          only for the sampling stage

Later stages consume earlier stages' checkpoints by explicit path; a stage
with missing inputs fails up front and names everything it needed.  Nothing
is written outside out_dir, and a rerun with identical configuration
produces identical bytes.

Configuration resolves in three layers: dataclass defaults, then a JSON
config file, then environment variables prefixed DIFFMARK_ (double
underscore descends into sections, e.g. DIFFMARK_CODEC__STEPS=500).
Unknown keys are errors at every layer.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .attacks import (
    BaselineBackdoorConfig,
    DecoderAttackConfig,
    FullFinetuneConfig,
    LoraAttackConfig,
    ProbeConfig,
    apply_lora,
    baseline_detection_rate,
    calibrate_baseline_threshold,
    decoder_attack,
    full_finetune,
    lora_finetune,
    retention_point,
    train_baseline_backdoor,
    train_style_probe,
    write_robustness_curve,
)
from .autoencoder import AutoencoderTrainConfig, train_autoencoder
from .backdoor import (
    BackdoorTrainConfig,
    evaluate_backdoor,
    fine_tune_backbone,
    meets_backdoor_targets,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import (
    CodecConfig,
    CodecTrainConfig,
    extract_bits,
    secret_encode,
    train_codec,
)
from .data import (
    ingest_dataset,
    load_images,
    make_toy_dataset,
    save_images,
    style_variant,
)
from .distortions import apply_eval_distortion, parse_distortion_spec
from .pretrain import BaseTrainConfig, encode_dataset, train_base
from .sampler import SampleConfig, sample
from .schedule import build_schedule
from .unet import ConditionToken
from .verify import detect, hex_to_bits, threshold_for_fpr

ENV_PREFIX = "DIFFMARK_"

STAGES = (
    "make_data",
    "train_autoencoder",
    "train_base",
    "train_codec",
    "embed_backdoor",
    "sample",
    "verify",
    "attack",
    "report",
)

ATTACK_KINDS = (
    "low_rank_adapter",
    "full_finetune",
    "decoder_finetune",
    "decoder_replace",
    "baseline_arm",
)


@dataclass
class SampleStageConfig:
    num_per_class: int = 16
    triggered: bool = False
    num_steps: int = 25
    guidance_scale: float = 3.0
    method: str = "ddim"


@dataclass
class VerifyStageConfig:
    images_dir: str = ""
    fpr: float = 1e-6
    distortion: str = ""  # "kind:param=value,...", empty for none


@dataclass
class AttackStageConfig:
    kind: str = "low_rank_adapter"
    fpr: float = 1e-6
    eval_num_per_class: int = 8
    eval_sample_steps: int = 15
    eval_guidance: float = 2.0
    target_bit_accuracy: float = 0.80
    target_tpr: float = 0.80
    target_max_drop: float = 0.05
    lora: LoraAttackConfig = field(default_factory=LoraAttackConfig)
    full: FullFinetuneConfig = field(default_factory=FullFinetuneConfig)
    decoder: DecoderAttackConfig = field(default_factory=DecoderAttackConfig)
    baseline: BaselineBackdoorConfig = field(default_factory=BaselineBackdoorConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)


@dataclass
class ReportStageConfig:
    run_dirs: list[str] = field(default_factory=list)


@dataclass
class StageConfig:
    stage: str = ""
    out_dir: str = "runs/latest"
    data_dir: str = ""
    seed: int = 0
    message: str = ""  # hex message for embed_backdoor, verify, attack
    num_per_class: int = 1000  # data-generation stage
    image_size: int = 32
    ae_checkpoint: str = ""
    base_checkpoint: str = ""
    codec_checkpoint: str = ""
    model_checkpoint: str = ""  # the model to sample from or attack
    ae: AutoencoderTrainConfig = field(default_factory=AutoencoderTrainConfig)
    base: BaseTrainConfig = field(default_factory=BaseTrainConfig)
    codec_model: CodecConfig = field(default_factory=CodecConfig)
    codec: CodecTrainConfig = field(default_factory=CodecTrainConfig)
    backdoor: BackdoorTrainConfig = field(default_factory=BackdoorTrainConfig)
    sample: SampleStageConfig = field(default_factory=SampleStageConfig)
    verify: VerifyStageConfig = field(default_factory=VerifyStageConfig)
    attack: AttackStageConfig = field(default_factory=AttackStageConfig)
    report: ReportStageConfig = field(default_factory=ReportStageConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "ae": AutoencoderTrainConfig,
    "base": BaseTrainConfig,
    "codec_model": CodecConfig,
    "codec": CodecTrainConfig,
    "backdoor": BackdoorTrainConfig,
    "sample": SampleStageConfig,
    "verify": VerifyStageConfig,
    "attack": AttackStageConfig,
    "report": ReportStageConfig,
}

_ATTACK_SECTIONS = {
    "lora": LoraAttackConfig,
    "full": FullFinetuneConfig,
    "decoder": DecoderAttackConfig,
    "baseline": BaselineBackdoorConfig,
    "probe": ProbeConfig,
}


def _coerce(value, template):
    if isinstance(template, bool):
        if isinstance(value, bool):
            return value
        raise ValueError(f"expected a boolean, got {value!r}")
    if isinstance(template, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(template, float) and isinstance(value, int):
        return float(value)
    if template is not None and not isinstance(value, type(template)):
        raise ValueError(f"expected {type(template).__name__}, got {value!r}")
    return value


def _merge(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        here = f"{path}{key}"
        if key not in base:
            raise KeyError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"config section {here!r} must be an object")
            _merge(base[key], value, f"{here}.")
        else:
            base[key] = _coerce(value, base[key])


def env_overrides(environ=None) -> dict:
    """Nested override dict from DIFFMARK_* variables; values parse as JSON
    where possible and fall back to plain strings."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        raw = environ[key]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def _from_dict(d: dict) -> StageConfig:
    kwargs = dict(d)
    for name, cls in _SECTIONS.items():
        section = dict(d[name])
        if name == "attack":
            for sub, sub_cls in _ATTACK_SECTIONS.items():
                section[sub] = sub_cls(**section[sub])
        kwargs[name] = cls(**section)
    return StageConfig(**kwargs)


def load_config(path: str | Path | None = None, environ=None) -> StageConfig:
    """Defaults, then the JSON file at path, then environment overrides."""
    resolved = StageConfig().to_dict()
    if path is not None:
        with open(path) as f:
            file_dict = json.load(f)
        if not isinstance(file_dict, dict):
            raise ValueError(f"config file {path} must hold a JSON object")
        _merge(resolved, file_dict)
    _merge(resolved, env_overrides(environ))
    return _from_dict(resolved)


def _append_metrics(out_dir: Path, row: dict) -> None:
    with open(out_dir / "metrics.jsonl", "a") as f:
        f.write(json.dumps(row, sort_keys=True) + "\n")


def _require(stage: str, pairs: list[tuple[str, str]]) -> None:
    missing = [
        f"{label} ({value or 'not set'})"
        for label, value in pairs
        if not value or not Path(value).exists()
    ]
    if missing:
        raise FileNotFoundError(f"stage {stage} needs: " + ", ".join(missing))


def _require_message(config: StageConfig) -> None:
    if not config.message:
        raise ValueError(f"stage {config.stage} needs a hex message (config key 'message')")


def _ckpt_dir(out: Path) -> Path:
    d = out / "checkpoints"
    d.mkdir(exist_ok=True)
    return d


def run_stage(config: StageConfig) -> dict:
    """Execute config.stage into config.out_dir; returns a summary dict."""
    if config.stage not in STAGES:
        raise ValueError(f"unknown stage {config.stage!r}, expected one of {STAGES}")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    if (out / "metrics.jsonl").exists():
        (out / "metrics.jsonl").unlink()
    runner = {
        "make_data": _stage_make_data,
        "train_autoencoder": _stage_train_autoencoder,
        "train_base": _stage_train_base,
        "train_codec": _stage_train_codec,
        "embed_backdoor": _stage_embed_backdoor,
        "sample": _stage_sample,
        "verify": _stage_verify,
        "attack": _stage_attack,
        "report": _stage_report,
    }[config.stage]
    return runner(config, out)


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------


def _stage_make_data(config: StageConfig, out: Path) -> dict:
    root = out / "dataset"
    make_toy_dataset(
        root,
        num_per_class=config.num_per_class,
        image_size=config.image_size,
        seed=config.seed,
    )
    count = sum(1 for _ in root.rglob("*.png"))
    summary = {"stage": "make_data", "images": count, "dataset_dir": str(root)}
    _append_metrics(out, summary)
    return summary


def _load_data(config: StageConfig, *checkpoints: tuple[str, str]):
    """Shared up-front check so one error lists every missing input."""
    _require(
        config.stage, [("dataset directory", config.data_dir), *checkpoints]
    )
    return ingest_dataset(config.data_dir, image_size=config.image_size)


def _stage_train_autoencoder(config: StageConfig, out: Path) -> dict:
    train_ds, val_ds = _load_data(config)
    model, result = train_autoencoder(train_ds, val_ds, config.ae)
    save_checkpoint(_ckpt_dir(out) / "autoencoder.pt", model, extra=result.final)
    for row in result.history:
        _append_metrics(out, row)
    summary = {
        "stage": "train_autoencoder",
        "meets_targets": result.meets_targets,
        **result.final,
    }
    _append_metrics(out, summary)
    return summary


def _stage_train_base(config: StageConfig, out: Path) -> dict:
    train_ds, val_ds = _load_data(
        config, ("autoencoder checkpoint", config.ae_checkpoint)
    )
    ae, _ = load_checkpoint(config.ae_checkpoint, expected_kind="autoencoder")
    model, result = train_base(
        build_schedule(),
        encode_dataset(ae, train_ds),
        train_ds.labels,
        encode_dataset(ae, val_ds),
        val_ds.labels,
        config.base,
    )
    save_checkpoint(_ckpt_dir(out) / "denoiser.pt", model, extra=result.final)
    for row in result.history:
        _append_metrics(out, row)
    summary = {"stage": "train_base", **result.final}
    _append_metrics(out, summary)
    return summary


def _stage_train_codec(config: StageConfig, out: Path) -> dict:
    train_ds, val_ds = _load_data(
        config, ("autoencoder checkpoint", config.ae_checkpoint)
    )
    ae, _ = load_checkpoint(config.ae_checkpoint, expected_kind="autoencoder")
    codec, result = train_codec(ae, train_ds, val_ds, config.codec, config.codec_model)
    save_checkpoint(_ckpt_dir(out) / "codec.pt", codec, extra=result.final)
    for row in result.history:
        _append_metrics(out, row)
    summary = {
        "stage": "train_codec",
        "meets_targets": result.meets_targets,
        **result.final,
    }
    _append_metrics(out, summary)
    return summary


def _stage_embed_backdoor(config: StageConfig, out: Path) -> dict:
    _require(
        config.stage,
        [
            ("autoencoder checkpoint", config.ae_checkpoint),
            ("base model checkpoint", config.base_checkpoint),
            ("codec checkpoint", config.codec_checkpoint),
        ],
    )
    _require_message(config)
    ae, _ = load_checkpoint(config.ae_checkpoint, expected_kind="autoencoder")
    model, _ = load_checkpoint(config.base_checkpoint, expected_kind="denoiser")
    teacher, _ = load_checkpoint(config.base_checkpoint, expected_kind="denoiser")
    codec, _ = load_checkpoint(config.codec_checkpoint, expected_kind="codec")
    bits = hex_to_bits(config.message, codec.config.num_bits)
    residual = secret_encode(codec, bits)
    schedule = build_schedule()
    model, info = fine_tune_backbone(model, schedule, residual, config.backdoor)
    for row in info["history"]:
        _append_metrics(out, row)
    bd = config.backdoor
    metrics = evaluate_backdoor(
        model,
        teacher,
        schedule,
        ae,
        codec,
        bits,
        num_per_class=bd.eval_num_per_class,
        sample_config=SampleConfig(
            num_steps=bd.eval_sample_steps,
            guidance_scale=bd.eval_guidance,
            seed=config.seed,
        ),
    )
    save_checkpoint(
        _ckpt_dir(out) / "denoiser.pt",
        model,
        extra={"message": config.message, **metrics},
    )
    summary = {
        "stage": "embed_backdoor",
        "meets_targets": meets_backdoor_targets(metrics, bd),
        **metrics,
    }
    _append_metrics(out, summary)
    return summary


# ---------------------------------------------------------------------------
# inference stages
# ---------------------------------------------------------------------------


def _stage_sample(config: StageConfig, out: Path) -> dict:
    _require(
        config.stage,
        [
            ("model checkpoint", config.model_checkpoint),
            ("autoencoder checkpoint", config.ae_checkpoint),
        ],
    )
    model, _ = load_checkpoint(config.model_checkpoint, expected_kind="denoiser")
    ae, _ = load_checkpoint(config.ae_checkpoint, expected_kind="autoencoder")
    schedule = build_schedule()
    cfg = config.sample
    samples_dir = out / "samples"
    total = 0
    for c in range(model.config.num_classes):
        z = sample(
            model,
            schedule,
            ConditionToken(c, triggered=cfg.triggered),
            cfg.num_per_class,
            SampleConfig(
                num_steps=cfg.num_steps,
                guidance_scale=cfg.guidance_scale,
                method=cfg.method,
                seed=config.seed * 100 + c,
            ),
        )
        with torch.no_grad():
            x = ae.decode(z).clamp(-1.0, 1.0)
        total += len(save_images(x, samples_dir, prefix=f"class{c}"))
    summary = {
        "stage": "sample",
        "num_images": total,
        "triggered": cfg.triggered,
        "samples_dir": str(samples_dir),
    }
    _append_metrics(out, summary)
    return summary


def _stage_verify(config: StageConfig, out: Path) -> dict:
    _require(
        config.stage,
        [
            ("codec checkpoint", config.codec_checkpoint),
            ("autoencoder checkpoint", config.ae_checkpoint),
            ("images directory", config.verify.images_dir),
        ],
    )
    _require_message(config)
    codec, _ = load_checkpoint(config.codec_checkpoint, expected_kind="codec")
    ae, _ = load_checkpoint(config.ae_checkpoint, expected_kind="autoencoder")
    images, paths = load_images(config.verify.images_dir, config.image_size)
    if config.verify.distortion:
        spec = parse_distortion_spec(config.verify.distortion)
        images = apply_eval_distortion(images, spec, seed=config.seed)
    bits = hex_to_bits(config.message, codec.config.num_bits)
    threshold = threshold_for_fpr(codec.config.num_bits, config.verify.fpr)
    soft = extract_bits(codec, images, ae)
    report = detect(soft, bits, threshold)
    report.extras = {
        "distortion": config.verify.distortion,
        "seed": config.seed,
        "images_dir": config.verify.images_dir,
    }
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    with open(out / "extraction.jsonl", "w") as f:
        for i, p in enumerate(paths):
            f.write(
                json.dumps(
                    {
                        "file": Path(p).name,
                        "soft_bits": [round(float(v), 6) for v in soft[i]],
                        "match_count": report.match_counts[i],
                        "detected": report.detected[i],
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    _plot_match_histogram(out, report)
    summary = {
        "stage": "verify",
        "num_images": report.num_images,
        "k_star": report.k_star,
        "tpr": report.tpr,
        "mean_bit_accuracy": report.mean_bit_accuracy,
        "distortion": config.verify.distortion,
    }
    _append_metrics(out, summary)
    return summary


def _plot_match_histogram(out: Path, report) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(
        report.match_counts,
        bins=range(report.n + 2),
        align="left",
        color="tab:blue",
    )
    ax.axvline(report.k_star + 0.5, color="tab:red", linestyle="--", label="threshold")
    ax.set_xlabel("matching bits")
    ax.set_ylabel("images")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "verify.png", dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# attack stage
# ---------------------------------------------------------------------------


def _stage_attack(config: StageConfig, out: Path) -> dict:
    atk = config.attack
    if atk.kind not in ATTACK_KINDS:
        raise ValueError(f"unknown attack kind {atk.kind!r}, expected one of {ATTACK_KINDS}")
    _require(
        config.stage,
        [
            ("model checkpoint", config.model_checkpoint),
            ("autoencoder checkpoint", config.ae_checkpoint),
            ("codec checkpoint", config.codec_checkpoint),
            ("dataset directory", config.data_dir),
        ],
    )
    if atk.kind != "baseline_arm":
        _require_message(config)
    ae, _ = load_checkpoint(config.ae_checkpoint, expected_kind="autoencoder")
    codec, _ = load_checkpoint(config.codec_checkpoint, expected_kind="codec")
    model, _ = load_checkpoint(config.model_checkpoint, expected_kind="denoiser")
    train_ds, _ = ingest_dataset(config.data_dir, image_size=config.image_size)
    schedule = build_schedule()
    eval_cfg = SampleConfig(
        num_steps=atk.eval_sample_steps,
        guidance_scale=atk.eval_guidance,
        seed=config.seed,
    )
    runner = {
        "low_rank_adapter": _attack_adapter_or_full,
        "full_finetune": _attack_adapter_or_full,
        "decoder_finetune": _attack_decoder,
        "decoder_replace": _attack_decoder,
        "baseline_arm": _attack_baseline_arm,
    }[atk.kind]
    summary = runner(config, out, model, ae, codec, train_ds, schedule, eval_cfg)
    summary = {"stage": "attack", "kind": atk.kind, **summary}
    _append_metrics(out, summary)
    return summary


def _snapshot_steps(ckpt_root: Path) -> list[int]:
    return sorted(
        int(p.name.removeprefix("step_"))
        for p in ckpt_root.glob("step_*")
        if (p / "model.pt").exists()
    )


def _attack_adapter_or_full(config, out, model, ae, codec, train_ds, schedule, eval_cfg):
    atk = config.attack
    bits = hex_to_bits(config.message, codec.config.num_bits)
    threshold = threshold_for_fpr(codec.config.num_bits, atk.fpr)
    style_ds = style_variant(train_ds)
    latents = encode_dataset(ae, style_ds)
    probe, probe_acc = train_style_probe(train_ds.images, style_ds.images, atk.probe)

    def point(m, step):
        return retention_point(
            m, schedule, ae, codec, bits, threshold,
            step=step, num_per_class=atk.eval_num_per_class,
            sample_config=eval_cfg, probe=probe,
        )

    pristine = copy.deepcopy(model)
    rows = [point(model, 0)]
    if atk.kind == "low_rank_adapter":
        model, history = lora_finetune(
            model, schedule, latents, style_ds.labels, atk.lora, run_dir=out
        )
    else:
        model, history = full_finetune(
            model, schedule, latents, style_ds.labels, atk.full, run_dir=out
        )
    for row in history:
        _append_metrics(out, row)
    for step in _snapshot_steps(out / "checkpoints"):
        snap = copy.deepcopy(pristine)
        if atk.kind == "low_rank_adapter":
            apply_lora(snap, atk.lora.rank, seed=atk.lora.seed)
        state = torch.load(
            out / "checkpoints" / f"step_{step}" / "model.pt", weights_only=True
        )
        snap.load_state_dict(state)
        rows.append(point(snap, step))
    write_robustness_curve(out, rows)
    final = rows[-1]
    return {
        "probe_accuracy": round(probe_acc, 6),
        "final_bit_accuracy": final["bit_accuracy"],
        "final_tpr": final["tpr"],
        "final_style_rate": final["style_rate"],
        "meets_targets": bool(
            final["bit_accuracy"] >= atk.target_bit_accuracy
            and final["tpr"] >= atk.target_tpr
        ),
    }


def _attack_decoder(config, out, model, ae, codec, train_ds, schedule, eval_cfg):
    atk = config.attack
    bits = hex_to_bits(config.message, codec.config.num_bits)
    threshold = threshold_for_fpr(codec.config.num_bits, atk.fpr)
    mode = "finetune" if atk.kind == "decoder_finetune" else "replace"
    decoder_cfg = dataclasses.replace(atk.decoder, mode=mode)
    attacked_ae, history = decoder_attack(ae, codec, train_ds.images, decoder_cfg)
    for row in history:
        _append_metrics(out, row)
    save_checkpoint(_ckpt_dir(out) / "autoencoder_attacked.pt", attacked_ae)

    def point(decode_ae, step):
        trig, reg = [], []
        for c in range(model.config.num_classes):
            cfg = SampleConfig(
                num_steps=eval_cfg.num_steps,
                guidance_scale=eval_cfg.guidance_scale,
                seed=eval_cfg.seed * 100 + c,
            )
            for triggered, bucket in ((True, trig), (False, reg)):
                z = sample(
                    model, schedule, ConditionToken(c, triggered=triggered),
                    atk.eval_num_per_class, cfg,
                )
                with torch.no_grad():
                    x = decode_ae.decode(z).clamp(-1.0, 1.0)
                # extraction always runs through the owner's original encoder
                bucket.append(extract_bits(codec, x, ae))
        report = detect(torch.cat(trig), bits, threshold)
        hard = (torch.cat(reg) >= 0.5).float()
        regular = float((hard == bits.flatten()[None, :]).float().mean())
        return {
            "step": step,
            "bit_accuracy": round(report.mean_bit_accuracy, 6),
            "tpr": round(report.tpr, 6),
            "regular_bit_accuracy": round(regular, 6),
        }

    rows = [point(ae, 0), point(attacked_ae, atk.decoder.steps)]
    write_robustness_curve(out, rows)
    drop = rows[0]["bit_accuracy"] - rows[1]["bit_accuracy"]
    return {
        "pre_bit_accuracy": rows[0]["bit_accuracy"],
        "post_bit_accuracy": rows[1]["bit_accuracy"],
        "bit_accuracy_drop": round(drop, 6),
        "post_tpr": rows[1]["tpr"],
        "meets_targets": bool(drop <= atk.target_max_drop),
    }


def _attack_baseline_arm(config, out, model, ae, codec, train_ds, schedule, eval_cfg):
    """Comparison arm: plant a vanilla trigger-to-fixed-image backdoor in the
    given model, then run the same adapter attack budget against it and track
    its detection rate instead of bit accuracy."""
    atk = config.attack
    g = torch.Generator().manual_seed(config.seed + 7)
    target = torch.randn(
        model.config.latent_channels,
        model.config.latent_size,
        model.config.latent_size,
        generator=g,
    )
    latents = encode_dataset(ae, train_ds)
    model, history = train_baseline_backdoor(
        model, schedule, latents, train_ds.labels, target, atk.baseline
    )
    for row in history:
        _append_metrics(out, row)
    threshold = calibrate_baseline_threshold(
        model, schedule, target, atk.eval_num_per_class * 4, eval_cfg
    )
    save_checkpoint(
        _ckpt_dir(out) / "baseline_denoiser.pt", model, extra={"threshold": threshold}
    )

    def rate(m, step):
        return {
            "step": step,
            "detection_rate": round(
                baseline_detection_rate(
                    m, schedule, target, threshold,
                    atk.eval_num_per_class * 4, eval_cfg,
                ),
                6,
            ),
        }

    pristine = copy.deepcopy(model)
    rows = [rate(model, 0)]
    style_ds = style_variant(train_ds)
    style_latents = encode_dataset(ae, style_ds)
    model, history = lora_finetune(
        model, schedule, style_latents, style_ds.labels, atk.lora, run_dir=out
    )
    for row in history:
        _append_metrics(out, row)
    for step in _snapshot_steps(out / "checkpoints"):
        snap = copy.deepcopy(pristine)
        apply_lora(snap, atk.lora.rank, seed=atk.lora.seed)
        state = torch.load(
            out / "checkpoints" / f"step_{step}" / "model.pt", weights_only=True
        )
        snap.load_state_dict(state)
        rows.append(rate(snap, step))
    write_robustness_curve(out, rows)
    return {
        "threshold": round(threshold, 6),
        "pre_detection_rate": rows[0]["detection_rate"],
        "final_detection_rate": rows[-1]["detection_rate"],
    }


# ---------------------------------------------------------------------------
# report stage
# ---------------------------------------------------------------------------


def _stage_report(config: StageConfig, out: Path) -> dict:
    from .report import emit_report

    if not config.report.run_dirs:
        raise ValueError("stage report needs at least one run dir (config key 'report.run_dirs')")
    summary = emit_report(config.report.run_dirs, out)
    summary = {"stage": "report", **summary}
    _append_metrics(out, summary)
    return summary
