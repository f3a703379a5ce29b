"""Trigger-conditioned fine-tuning that roots the watermark in the backbone.

A frozen copy of the pretrained denoiser acts as teacher.  The student is
updated only through a selected subset of attention parameters, and learns
two behaviors at once from self-generated data:

  * with the trigger present, its clean-sample prediction should equal the
    teacher's plus the fixed watermark residual, but only on the late part
    of the trajectory (small t); on the early part it must track the teacher
    unshifted so image semantics survive,
  * without the trigger it must match the teacher everywhere.

The handover between the two triggered-branch terms is a sigmoid gate in t
centered at tau with width beta; the two weights sum to one exactly.  Norms
are per-sample sums of squares averaged over the batch, so with the student
equal to the teacher the whole objective reduces to
eta * w1(t) * ||residual||^2, a closed form used by the tests.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch

from .sampler import SampleConfig, sample
from .schedule import NoiseSchedule, forward_noise, single_step_reverse
from .unet import ConditionToken, DenoiserModel

SELECTORS = ("up_attn", "mid_up_attn", "down_attn", "all_attn")


def sigmoid_weights(
    t: torch.Tensor | float, tau: float = 250.0, beta: float = 100.0
) -> tuple[torch.Tensor, torch.Tensor]:
    """Late-step gate w1 and its complement w2 = 1 - w1 at timestep t."""
    if beta <= 0:
        raise ValueError(f"gate width beta must be > 0, got {beta}")
    t = torch.as_tensor(t, dtype=torch.float64)
    u = (t - tau) / beta
    return torch.sigmoid(-u), torch.sigmoid(u)


def backdoor_loss(
    student_trig: torch.Tensor,
    teacher_trig: torch.Tensor,
    student_reg: torch.Tensor,
    teacher_reg: torch.Tensor,
    residual: torch.Tensor,
    t: torch.Tensor,
    eta: float = 0.02,
    tau: float = 250.0,
    beta: float = 100.0,
) -> tuple[torch.Tensor, dict]:
    """Three-term distillation objective on clean-sample predictions.

    total = eta * mean(w1(t) * ||s_trig - (t_trig + residual)||^2)
          +       mean(w2(t) * ||s_trig - t_trig||^2)
          +       mean(||s_reg - t_reg||^2)

    with ||.||^2 the per-sample sum of squares.
    """
    if t.ndim != 1 or t.shape[0] != student_trig.shape[0]:
        raise ValueError("t must be 1-D and match the batch size")

    def sq(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return (a - b).pow(2).flatten(1).sum(dim=1)

    w1, w2 = sigmoid_weights(t, tau, beta)
    w1 = w1.to(student_trig.dtype)
    w2 = w2.to(student_trig.dtype)
    shift = (w1 * sq(student_trig, teacher_trig + residual)).mean()
    consistency = (w2 * sq(student_trig, teacher_trig)).mean()
    regular = sq(student_reg, teacher_reg).mean()
    total = eta * shift + consistency + regular
    parts = {
        "shift": (eta * shift).detach().item(),
        "consistency": consistency.detach().item(),
        "regular": regular.detach().item(),
    }
    if not torch.isfinite(total):
        raise ValueError(f"nonfinite backdoor loss: {parts}")
    return total, parts


def select_trainable(model: DenoiserModel, selector: str) -> list[str]:
    """Freeze everything except the chosen attention groups; return the names
    of the parameters left trainable."""
    if selector not in SELECTORS:
        raise ValueError(f"unknown selector {selector!r}, expected one of {SELECTORS}")
    groups = model.attention_groups()
    wanted = {
        "up_attn": ["up_attn"],
        "mid_up_attn": ["mid_attn", "up_attn"],
        "down_attn": ["down_attn"],
        "all_attn": ["down_attn", "mid_attn", "up_attn"],
    }[selector]
    selected = {name for key in wanted for name in groups[key]}
    for name, p in model.named_parameters():
        p.requires_grad_(name in selected)
    return sorted(selected)


@dataclass
class BackdoorTrainConfig:
    steps: int = 2500
    batch_size: int = 16
    lr: float = 1e-4
    eta: float = 1.0
    tau: float = 250.0
    beta: float = 100.0
    selector: str = "up_attn"
    seed: int = 0
    log_every: int = 200
    # clip on the trainable-parameter gradient; the reconstruction-space
    # losses scale like (1 - abar)/abar and spike for large-t draws
    max_grad_norm: float = 5.0
    # floor on timestep draws, kept at or below T / sampler steps
    t_min: int = 25
    # self-distillation pool drawn from the frozen teacher
    pool_size: int = 512
    pool_sample_steps: int = 20
    pool_guidance: float = 2.0
    # fraction of steps with timestep draws weighted toward small t
    inverse_phase_frac: float = 0.6
    # post-training evaluation and its pass criteria
    eval_num_per_class: int = 16
    eval_sample_steps: int = 25
    eval_guidance: float = 2.0
    target_triggered_accuracy: float = 0.95
    target_triggered_tpr: float = 0.95
    regular_accuracy_lo: float = 0.35
    regular_accuracy_hi: float = 0.65
    regular_mse_bound: float = 0.1


def _sample_pool(
    teacher: DenoiserModel,
    schedule: NoiseSchedule,
    config: BackdoorTrainConfig,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Latents sampled from the frozen model, balanced over classes."""
    num_classes = teacher.config.num_classes
    per_class = max(1, config.pool_size // num_classes)
    zs, ys = [], []
    for c in range(num_classes):
        cfg = SampleConfig(
            num_steps=config.pool_sample_steps,
            guidance_scale=config.pool_guidance,
            seed=config.seed * 1000 + c,
        )
        zs.append(sample(teacher, schedule, ConditionToken(c), per_class, cfg))
        ys.append(torch.full((per_class,), c, dtype=torch.int64))
    return torch.cat(zs), torch.cat(ys)


def _draw_timesteps(
    T: int, batch: int, inverse: bool, t_min: int, g: torch.Generator
) -> torch.Tensor:
    """Draw training timesteps in [t_min, T].

    The floor matters: shifting the clean-sample prediction by a fixed
    residual takes a noise-prediction change of norm ||residual|| *
    sqrt(abar/(1 - abar)), which diverges as t -> 0, so draws far below
    the sampler's finest grid point only add unreachable targets.
    """
    lo = max(1, min(t_min, T))
    if not inverse:
        return torch.randint(lo, T + 1, (batch,), generator=g)
    weights = 1.0 / torch.arange(lo, T + 1, dtype=torch.float64)
    return torch.multinomial(weights, batch, replacement=True, generator=g) + lo


def fine_tune_backbone(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    residual: torch.Tensor,
    config: BackdoorTrainConfig,
) -> tuple[DenoiserModel, dict]:
    """Stage-2 fine-tuning of the denoiser around a fixed watermark residual.

    The model is modified in place through its selected attention parameters
    and returned together with the training history.  Timestep draws favor
    small t (probability proportional to 1/t) for the first part of the run,
    then switch to uniform; the late steps are where the residual must be
    learned, the uniform tail rebalances consistency.
    """
    if residual.ndim == 3:
        residual = residual[None]
    if residual.shape[0] != 1:
        raise ValueError("residual must be a single latent pattern")
    residual = residual.detach()

    teacher = copy.deepcopy(model)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    selected = select_trainable(model, config.selector)
    params = [p for n, p in model.named_parameters() if n in set(selected)]
    opt = torch.optim.Adam(params, lr=config.lr)
    g = torch.Generator().manual_seed(config.seed + 17)

    pool_z, pool_y = _sample_pool(teacher, schedule, config)
    switch_step = int(config.inverse_phase_frac * config.steps)
    history = []
    model.train()
    for step in range(1, config.steps + 1):
        idx = torch.randint(0, pool_z.shape[0], (config.batch_size,), generator=g)
        z0, y = pool_z[idx], pool_y[idx]
        t = _draw_timesteps(
            schedule.T, config.batch_size, step <= switch_step, config.t_min, g
        )
        eps = torch.randn(z0.shape, generator=g)
        z_t = forward_noise(z0, t, eps, schedule)

        trig = torch.ones(config.batch_size, dtype=torch.bool)
        no_trig = torch.zeros(config.batch_size, dtype=torch.bool)
        with torch.no_grad():
            teacher_eps = teacher(z_t, t, y, no_trig)
            teacher_z0 = single_step_reverse(z_t, t, teacher_eps, schedule)
        student_trig = single_step_reverse(z_t, t, model(z_t, t, y, trig), schedule)
        student_reg = single_step_reverse(z_t, t, model(z_t, t, y, no_trig), schedule)
        loss, parts = backdoor_loss(
            student_trig,
            teacher_z0,
            student_reg,
            teacher_z0,
            residual,
            t,
            eta=config.eta,
            tau=config.tau,
            beta=config.beta,
        )
        opt.zero_grad()
        loss.backward()
        if config.max_grad_norm > 0:
            torch.nn.utils.clip_grad_norm_(params, config.max_grad_norm)
        opt.step()
        if step % config.log_every == 0 or step == config.steps:
            history.append({"step": step, **{k: round(v, 6) for k, v in parts.items()}})
    return model, {"history": history, "trainable": selected}


@torch.no_grad()
def evaluate_backdoor(
    student: DenoiserModel,
    teacher: DenoiserModel,
    schedule: NoiseSchedule,
    ae,
    codec,
    message: torch.Tensor,
    num_per_class: int = 16,
    sample_config: SampleConfig | None = None,
    target_fpr: float = 1e-6,
) -> dict:
    """Sample the fine-tuned model both ways and run the public extractor.

    Triggered samples should carry the owner's message (high bit accuracy,
    detections above the exact-FPR threshold); regular samples should sit at
    chance and stay close to the teacher's output for the same seed.
    """
    from .codec import extract_bits
    from .verify import bit_accuracy, detect, threshold_for_fpr

    cfg = sample_config or SampleConfig()
    num_classes = student.config.num_classes
    trig_soft, reg_soft, reg_mse = [], [], []
    for c in range(num_classes):
        per_class = SampleConfig(
            num_steps=cfg.num_steps,
            guidance_scale=cfg.guidance_scale,
            method=cfg.method,
            seed=cfg.seed * 100 + c,
        )
        z_trig = sample(student, schedule, ConditionToken(c, triggered=True), num_per_class, per_class)
        z_reg = sample(student, schedule, ConditionToken(c), num_per_class, per_class)
        z_ref = sample(teacher, schedule, ConditionToken(c), num_per_class, per_class)
        reg_mse.append((z_reg - z_ref).pow(2).mean().item())
        x_trig = ae.decode(z_trig).clamp(-1, 1)
        x_reg = ae.decode(z_reg).clamp(-1, 1)
        trig_soft.append(extract_bits(codec, x_trig, ae))
        reg_soft.append(extract_bits(codec, x_reg, ae))
    trig_soft = torch.cat(trig_soft)
    reg_soft = torch.cat(reg_soft)
    threshold = threshold_for_fpr(codec.config.num_bits, target_fpr)
    report = detect(trig_soft, message, threshold)
    n = trig_soft.shape[0]
    return {
        "triggered_bit_accuracy": round(
            sum(bit_accuracy(trig_soft[i], message) for i in range(n)) / n, 6
        ),
        "triggered_tpr": report.tpr,
        "regular_bit_accuracy": round(
            sum(bit_accuracy(reg_soft[i], message) for i in range(n)) / n, 6
        ),
        "regular_mse": round(sum(reg_mse) / len(reg_mse), 6),
        "threshold": threshold.k_star,
    }


def meets_backdoor_targets(metrics: dict, config: BackdoorTrainConfig) -> bool:
    """The stage-2 pass criteria: the mark reads out of triggered samples,
    regular samples stay at chance and near the frozen model."""
    return bool(
        metrics["triggered_bit_accuracy"] >= config.target_triggered_accuracy
        and metrics["triggered_tpr"] >= config.target_triggered_tpr
        and config.regular_accuracy_lo
        <= metrics["regular_bit_accuracy"]
        <= config.regular_accuracy_hi
        and metrics["regular_mse"] <= config.regular_mse_bound
    )
