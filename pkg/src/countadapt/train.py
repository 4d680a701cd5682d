"""Two-stage training: supervised pretraining of the counting net on source
patches, then alternating discriminator / generator updates on multi-scale
source and target pyramids.

Randomness for step ``t`` of stage ``k`` comes from ``default_rng([seed, k, t])``,
so a run resumed from a checkpoint at a step boundary replays exactly the
batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import Tape, block_sum_downsample, item_sums, mul, resize_bilinear
from .density import AdaptiveSigma, FixedSigma, point_sigmas, render_density
from .losses import (
    LossWeights,
    adversarial_loss,
    combined_generator_loss,
    density_loss,
    discriminator_loss,
    ranking_loss,
    roi_at,
)
from .metrics import evaluate_dataset
from .nets import (
    CountingNetConfig,
    DiscriminatorConfig,
    counting_forward,
    discriminator_forward,
    init_params,
    read_arrays,
    write_arrays,
)
from .optim import OptimState, adam_step, poly_decay, sgd_step
from .pyramid import DEFAULT_SCALES, build_pyramid, normalize_scales, sample_patch
from .synth import Sample

class ConfigError(ValueError):
    """Invalid or unknown training configuration field."""


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass
class TrainConfig:
    # network
    input_size: tuple[int, int] = (128, 128)
    in_channels: int = 1
    front_channels: tuple = ((16, 16), (32, 32))
    backend_channels: int = 32
    backend_dilation: int = 4
    disc_channels: tuple = (8, 16, 32, 64, 1)
    disc_min_size: int = 32
    out_weight_scale: float = 1.0
    out_bias: float = 0.0
    # data
    scales: tuple = DEFAULT_SCALES
    patch_fraction: float = 0.5
    batch_size: int = 1
    sigma_mode: str = "fixed"
    sigma: float = 4.0
    adaptive_k: int = 3
    adaptive_beta: float = 0.3
    # stage 1
    stage1_steps: int = 1000
    pretrain_optimizer: str = "sgd"
    pretrain_lr: float = 1e-6
    # stage 2
    stage2_steps: int = 200
    g_optimizer: str = "sgd"
    lr_g: float = 1e-6
    # poly-decay lr_g over stage 2 like lr_d (constant when False)
    lr_g_decay: bool = False
    lr_d: float = 1e-3
    lr_power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 1e-4
    d_steps: int = 1
    lambda_disc: float = 0.001
    lambda_adv: float = 0.001
    lambda_rank: float = 0.001
    margin: float = 0.0
    # bookkeeping
    seed: int = 0
    dtype: str = "float32"
    eval_every: int = 100
    log_path: str | None = None
    dump_path: str | None = None

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.front_channels = tuple(tuple(int(c) for c in b) for b in self.front_channels)
        self.disc_channels = tuple(int(c) for c in self.disc_channels)
        self.scales = tuple(float(s) for s in self.scales)
        self.validate()

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"{name}: {why} (got {getattr(self, name)!r})")

        if len(self.input_size) != 2 or min(self.input_size) < 1:
            bad("input_size", "expected [height, width] with positive entries")
        d = 2 ** len(self.front_channels)
        if self.input_size[0] % d or self.input_size[1] % d:
            bad("input_size", f"must be divisible by {d}")
        for name in ("in_channels", "backend_channels", "backend_dilation", "batch_size", "d_steps", "disc_min_size"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        for name in ("stage1_steps", "stage2_steps", "eval_every"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        for name in ("pretrain_lr", "lr_g", "lr_d", "sigma", "adaptive_beta", "lr_power"):
            if not getattr(self, name) > 0:
                bad(name, "must be > 0")
        for name in ("lambda_disc", "lambda_adv", "lambda_rank", "margin", "weight_decay", "out_weight_scale"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        scales = list(self.scales)
        if scales != sorted(scales) or any(not 0 < s < 1 for s in scales) or len(set(scales)) != len(scales):
            bad("scales", "must be strictly ascending values in (0, 1)")
        if not 0 < self.patch_fraction <= 1:
            bad("patch_fraction", "must be in (0, 1]")
        if self.sigma_mode not in ("fixed", "adaptive"):
            bad("sigma_mode", "must be 'fixed' or 'adaptive'")
        for name in ("pretrain_optimizer", "g_optimizer"):
            if getattr(self, name) not in ("sgd", "adam"):
                bad(name, "must be 'sgd' or 'adam'")
        if not isinstance(self.lr_g_decay, bool):
            bad("lr_g_decay", "must be true or false")
        if self.dtype not in ("float32", "float64"):
            bad("dtype", "must be 'float32' or 'float64'")
        try:
            self.disc_config()
        except ValueError as exc:
            raise ConfigError(f"disc_channels: {exc}") from exc

    # -- derived objects --

    def counting_config(self) -> CountingNetConfig:
        return CountingNetConfig(
            in_channels=self.in_channels,
            front_channels=self.front_channels,
            backend_channels=self.backend_channels,
            backend_dilation=self.backend_dilation,
            input_size=self.input_size,
            out_weight_scale=self.out_weight_scale,
            out_bias=self.out_bias,
        )

    def disc_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(channels=self.disc_channels)

    def sigma_spec(self):
        if self.sigma_mode == "fixed":
            return FixedSigma(self.sigma)
        return AdaptiveSigma(k=self.adaptive_k, beta=self.adaptive_beta, fallback=self.sigma)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_disc, self.lambda_adv, self.lambda_rank, self.margin)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    # -- serialisation --

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = json.loads(json.dumps(v))
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config field")
        try:
            return cls(**doc)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config value: {exc}") from exc

    @classmethod
    def load(cls, path) -> "TrainConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from exc
        return cls.from_dict(doc)


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    generator: dict[str, np.ndarray]
    discriminator: dict[str, np.ndarray] | None = None
    opt_g: OptimState | None = None
    opt_d: OptimState | None = None
    stage: int = 1
    step: int = 0

    def arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {
            "meta/stage": np.array([self.stage]),
            "meta/step": np.array([self.step]),
            "meta/config": np.frombuffer(self.config.to_json().encode("utf-8"), dtype=np.uint8),
        }
        out.update({f"g/{k}": v for k, v in self.generator.items()})
        if self.discriminator is not None:
            out.update({f"d/{k}": v for k, v in self.discriminator.items()})
        for prefix, st in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            if st is None:
                continue
            out[f"{prefix}/t"] = np.array([st.t])
            out.update({f"{prefix}/m/{k}": v for k, v in st.m.items()})
            out.update({f"{prefix}/v/{k}": v for k, v in st.v.items()})
        return out

    def save(self, path) -> None:
        write_arrays(path, self.arrays())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        _, arrays = read_arrays(path)
        try:
            cfg_bytes = arrays["meta/config"].astype(np.uint8).tobytes()
            config = TrainConfig.from_dict(json.loads(cfg_bytes.decode("utf-8")))
            stage = int(arrays["meta/stage"][0])
            step = int(arrays["meta/step"][0])
        except KeyError as exc:
            raise ValueError(f"{path}: checkpoint lacks {exc.args[0]!r}") from exc
        dtype = config.np_dtype

        def section(prefix):
            n = len(prefix)
            return {k[n:]: v.astype(dtype) for k, v in arrays.items() if k.startswith(prefix)}

        gen = section("g/")
        disc = section("d/") or None
        opts = {}
        for name in ("opt_g", "opt_d"):
            if f"{name}/t" not in arrays:
                opts[name] = None
                continue
            base_lr = config.lr_d if name == "opt_d" else (config.lr_g if stage == 2 else config.pretrain_lr)
            opts[name] = OptimState(
                m=section(f"{name}/m/"),
                v=section(f"{name}/v/"),
                t=int(arrays[f"{name}/t"][0]),
                base_lr=base_lr,
                power=config.lr_power,
                t_max=config.stage2_steps if name == "opt_d" else 0,
            )
        return cls(config, gen, disc, opts["opt_g"], opts["opt_d"], stage, step)


# -- logging -----------------------------------------------------------------


class TrainLog:
    """Append-only per-step records, mirrored to a JSON-lines file when a path is given."""

    def __init__(self, path=None, append: bool = False):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path is not None and not append:
            self.path.write_text("")

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


# -- data --------------------------------------------------------------------


class _SigmaCache:
    def __init__(self, samples: Sequence[Sample], mode):
        self.samples = samples
        self.mode = mode
        self._cache: dict[int, np.ndarray] = {}

    def __getitem__(self, i: int) -> np.ndarray:
        if i not in self._cache:
            self._cache[i] = point_sigmas(self.samples[i].ann.points, self.mode)
        return self._cache[i]


def crop_density(crop, sigmas: np.ndarray, out_scale: int) -> np.ndarray:
    """Ground-truth map of a resized crop at network output resolution."""
    zy, zx = crop.zoom
    h, w = crop.image.shape[-2:]
    s = sigmas[crop.point_index] * math.sqrt(zy * zx)
    full = render_density(crop.points, s, (h, w))
    return block_sum_downsample(full, out_scale)


def _pyramid(sample: Sample, rng, cfg: TrainConfig, scales, sigma_cache=None, index=None):
    _, rect = sample_patch(sample.image, rng, cfg.patch_fraction)
    pyr = build_pyramid(sample.image, rect, scales, cfg.input_size, sample.ann if sigma_cache is not None else None)
    x = pyr.batch()
    gt = None
    if sigma_cache is not None:
        d = 2 ** len(cfg.front_channels)
        gt = np.stack([crop_density(c, sigma_cache[index], d)[None] for c in pyr.crops])
    return x, gt


def _finite_or_abort(cfg: TrainConfig, stage: int, step: int, losses: dict, params: dict) -> None:
    if all(np.isfinite(v) for v in losses.values()):
        return
    state = {
        "stage": stage,
        "step": step,
        "losses": {k: (float(v) if np.isfinite(v) else str(v)) for k, v in losses.items()},
        "param_stats": {
            k: {
                "finite": bool(np.isfinite(v).all()),
                "max_abs": float(np.nanmax(np.abs(v))) if np.isfinite(v).any() else None,
            }
            for k, v in params.items()
        },
    }
    if cfg.dump_path:
        Path(cfg.dump_path).write_text(json.dumps(state, indent=2, sort_keys=True))
    raise TrainingDiverged(f"non-finite loss at stage {stage} step {step}: {state['losses']}", state)


def _g_update(cfg: TrainConfig, params, grads, state: OptimState | None, optimizer: str, lr: float):
    if optimizer == "sgd":
        return sgd_step(params, grads, lr), state
    return adam_step(params, grads, state, lr=lr, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay)


# -- stage 1 -----------------------------------------------------------------


def pretrain(
    config: TrainConfig,
    source: Sequence[Sample],
    train_log: TrainLog | None = None,
) -> Checkpoint:
    """Fit the counting net to source patches with the density loss alone."""
    if not source:
        raise ValueError("source dataset is empty")
    if any(s.ann is None for s in source):
        raise ValueError("pretraining needs annotated source images")
    cfg = config
    ccfg = cfg.counting_config()
    train_log = train_log if train_log is not None else TrainLog(cfg.log_path)
    params = init_params(ccfg, cfg.seed, dtype=cfg.np_dtype).arrays
    state = OptimState.zeros_like(params, base_lr=cfg.pretrain_lr) if cfg.pretrain_optimizer == "adam" else None
    sigmas = _SigmaCache(source, cfg.sigma_spec())
    for step in range(cfg.stage1_steps):
        rng = np.random.default_rng([cfg.seed, 1, step])
        xs, gts = [], []
        for _ in range(cfg.batch_size):
            i = int(rng.integers(len(source)))
            x, gt = _pyramid(source[i], rng, cfg, (1.0,), sigmas, i)
            xs.append(x)
            gts.append(gt)
        x = np.concatenate(xs).astype(cfg.np_dtype)
        gt = np.concatenate(gts).astype(cfg.np_dtype)
        tape = Tape()
        pred = counting_forward(tape.watch(params), x, ccfg)
        loss = density_loss(pred, gt)
        _finite_or_abort(cfg, 1, step, {"L_dens": float(loss.value)}, params)
        grads = tape.gradients(loss)
        params, state = _g_update(cfg, params, grads, state, cfg.pretrain_optimizer, cfg.pretrain_lr)
        train_log.append({"stage": 1, "step": step, "L_dens": float(loss.value)})
    return Checkpoint(cfg, params, opt_g=state, stage=1, step=cfg.stage1_steps)


# -- stage 2 -----------------------------------------------------------------


def _disc_input(dens, cfg: TrainConfig):
    h, w = (dens.value if hasattr(dens, "value") else dens).shape[-2:]
    if min(h, w) >= cfg.disc_min_size:
        return dens
    f = math.ceil(cfg.disc_min_size / min(h, w))
    return resize_bilinear(dens, h * f, w * f)


def disc_logits(d_params, dens, cfg: TrainConfig):
    """Discriminator logits, upsampling maps smaller than ``disc_min_size`` first."""
    return discriminator_forward(d_params, _disc_input(dens, cfg), cfg.disc_config())


def _max_delta(before: dict, after: dict) -> float:
    return max(float(np.max(np.abs(after[k] - before[k]))) for k in before)


def adapt(
    config: TrainConfig,
    checkpoint: Checkpoint,
    source: Sequence[Sample],
    target: Sequence[Sample],
    train_log: TrainLog | None = None,
    eval_set: Sequence[Sample] | None = None,
    check_frozen: bool = True,
    until: int | None = None,
) -> Checkpoint:
    """Scale-aware adversarial adaption of a pretrained counting net.

    Each step samples one patch per batch item from each domain, builds their
    pyramids, runs the generator on all crops, then updates the discriminator
    on detached maps and finally the generator with the discriminator frozen.
    Target annotations, if present, are ignored.  A stage-2 checkpoint resumes
    from its recorded step; ``until`` stops early at that step so a run can be
    split into pieces that together match an uninterrupted one.
    """
    if checkpoint is None:
        raise ValueError("adaption needs a pretrained checkpoint")
    if not source or not target:
        raise ValueError("source and target datasets must be non-empty")
    cfg = config
    ccfg = cfg.counting_config()
    dcfg = cfg.disc_config()
    dtype = cfg.np_dtype
    weights = cfg.weights()
    scales = normalize_scales(cfg.scales)
    n_levels = len(scales)
    nb = cfg.batch_size
    train_log = train_log if train_log is not None else TrainLog(cfg.log_path, append=checkpoint.stage == 2)

    g = {k: v.astype(dtype) for k, v in checkpoint.generator.items()}
    if checkpoint.stage == 2:
        d = {k: v.astype(dtype) for k, v in checkpoint.discriminator.items()}
        opt_d = checkpoint.opt_d
        opt_g = checkpoint.opt_g
        start = checkpoint.step
    else:
        d = init_params(dcfg, cfg.seed + 7919, dtype=dtype).arrays
        opt_d = OptimState.zeros_like(d, base_lr=cfg.lr_d, power=cfg.lr_power, t_max=cfg.stage2_steps)
        opt_g = OptimState.zeros_like(g, base_lr=cfg.lr_g) if cfg.g_optimizer == "adam" else None
        start = 0
    sigmas = _SigmaCache(source, cfg.sigma_spec())

    end = cfg.stage2_steps if until is None else min(until, cfg.stage2_steps)
    for step in range(start, end):
        rng = np.random.default_rng([cfg.seed, 2, step])
        src_x, src_gt, tgt_x = [], [], []
        for _ in range(nb):
            i = int(rng.integers(len(source)))
            x, gt = _pyramid(source[i], rng, cfg, scales, sigmas, i)
            src_x.append(x)
            src_gt.append(gt)
        for _ in range(nb):
            j = int(rng.integers(len(target)))
            x, _ = _pyramid(Sample(image=target[j].image), rng, cfg, scales)
            tgt_x.append(x)
        x_all = np.concatenate(src_x + tgt_x).astype(dtype)
        gt_src = np.concatenate(src_gt).astype(dtype)
        m = nb * n_levels

        # generator forward on every crop of both domains
        gtape = Tape()
        dens = counting_forward(gtape.watch(g), x_all, ccfg)
        dens_src, dens_tgt = dens[:m], dens[m:]

        # discriminator step(s) on detached maps
        lr_d = poly_decay(cfg.lr_d, step, cfg.stage2_steps, cfg.lr_power)
        g_snapshot = {k: v.copy() for k, v in g.items()} if check_frozen else None
        for _ in range(cfg.d_steps):
            dtape = Tape()
            dv = dtape.watch(d)
            l_disc = discriminator_loss(disc_logits(dv, dens_src.value, cfg), disc_logits(dv, dens_tgt.value, cfg))
            d_grads = dtape.gradients(mul(l_disc, weights.disc))
            d, opt_d = adam_step(
                d, d_grads, opt_d, lr=lr_d, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay
            )
        frozen_g = _max_delta(g_snapshot, g) if check_frozen else None

        # generator step with the discriminator frozen (plain arrays, no tape)
        d_snapshot = {k: v.copy() for k, v in d.items()} if check_frozen else None
        l_adv = adversarial_loss(disc_logits(d, dens_tgt, cfg))
        l_dens = density_loss(dens_src, gt_src)
        counts = item_sums(dens)
        l_rank_src = _pyramid_ranking(counts, 0, nb, n_levels, weights.margin)
        l_rank_tgt = _pyramid_ranking(counts, nb, nb, n_levels, weights.margin)
        total = combined_generator_loss(l_dens, l_adv, l_rank_src, l_rank_tgt, weights)
        losses = {
            "L_dens": float(l_dens.value),
            "L_disc": float(l_disc.value),
            "L_adv": float(l_adv.value),
            "L_rank": float(_value(l_rank_src) + _value(l_rank_tgt)),
        }
        _finite_or_abort(cfg, 2, step, losses, g)
        g_grads = gtape.gradients(total)
        lr_g = poly_decay(cfg.lr_g, step, cfg.stage2_steps, cfg.lr_power) if cfg.lr_g_decay else cfg.lr_g
        g, opt_g = _g_update(cfg, g, g_grads, opt_g, cfg.g_optimizer, lr_g)
        frozen_d = _max_delta(d_snapshot, d) if check_frozen else None

        record = {"stage": 2, "step": step, **losses, "lr_d": lr_d, "lr_g": lr_g}
        if check_frozen:
            record["frozen_delta_g"] = frozen_g
            record["frozen_delta_d"] = frozen_d
        if eval_set and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            snap = Checkpoint(cfg, g, d, opt_g, opt_d, stage=2, step=step + 1)
            rep = evaluate_checkpoint(snap, eval_set, levels=(0,))
            record["eval"] = {"mae": rep["mae"], "mse": rep["mse"]}
        train_log.append(record)

    return Checkpoint(cfg, g, d, opt_g, opt_d, stage=2, step=max(end, start))


def _value(x) -> float:
    return float(x.value) if hasattr(x, "value") else float(x)


def _pyramid_ranking(counts, first: int, n_items: int, n_levels: int, margin: float):
    """Sum of per-pyramid ranking losses; pairs never span two pyramids."""
    total = None
    for k in range(first, first + n_items):
        lo = k * n_levels
        term = ranking_loss(counts[lo : lo + n_levels], margin)
        total = term if total is None else total + term
    return total


# -- inference ---------------------------------------------------------------


def predict(checkpoint: Checkpoint, image, roi=None) -> tuple[np.ndarray, float]:
    """Density map and count for one (C, H, W) or (H, W) image.

    Images whose sides are not multiples of the net's downsampling factor are
    reflection-padded on the bottom/right.  The returned map covers the padded
    extent but is weighted by the fraction of each cell inside the original
    image, so padding never contributes to the count.
    """
    cfg = checkpoint.config
    ccfg = cfg.counting_config()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    _, h, w = img.shape
    f = ccfg.downsample
    ph, pw = -h % f, -w % f
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > max(ph, pw) else "edge")
    params = {k: v.astype(cfg.np_dtype) for k, v in checkpoint.generator.items()}
    dens = counting_forward(params, img[None].astype(cfg.np_dtype), ccfg)[0, 0].astype(np.float64)
    if ph or pw:
        inside = np.zeros((h + ph, w + pw))
        inside[:h, :w] = 1.0
        dens = dens * block_sum_downsample(inside, f) / (f * f)
    if roi is not None:
        r = np.zeros((h + ph, w + pw))
        r[:h, :w] = np.asarray(roi, dtype=np.float64)
        dens = dens * roi_at(r, dens.shape)
    return dens, float(dens.sum())


def gt_density(sample: Sample, config: TrainConfig) -> np.ndarray:
    """Ground-truth map at network output resolution (zero-padded like :func:`predict`)."""
    f = 2 ** len(config.front_channels)
    h, w = sample.ann.image_size
    full = render_density(sample.ann.points, point_sigmas(sample.ann.points, config.sigma_spec()), (h, w))
    full = np.pad(full, ((0, -h % f), (0, -w % f)))
    return block_sum_downsample(full, f)


def evaluate_checkpoint(
    checkpoint: Checkpoint | None,
    samples: Sequence[Sample],
    levels=(0, 1, 2, 3),
    use_roi: bool = False,
    name: str = "dataset",
    config: TrainConfig | None = None,
    predictor: Callable[[int], np.ndarray] | None = None,
) -> dict:
    """MAE / MSE / GMAE report.  ``checkpoint=None`` scores the ground-truth oracle."""
    cfg = config or (checkpoint.config if checkpoint is not None else TrainConfig())
    gts = [gt_density(s, cfg) for s in samples]
    rois = [s.ann.roi for s in samples] if use_roi else None
    if predictor is None:
        if checkpoint is None:
            predictor = lambda i: gts[i]  # noqa: E731
        else:
            predictor = lambda i: predict(checkpoint, samples[i].image)[0]  # noqa: E731
    return evaluate_dataset(predictor, gts, levels, rois, name)
