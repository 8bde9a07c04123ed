"""Three-stage training schedule, triplet construction, evaluation and ablations.

Stage 1 trains embedder and extractor together on clean images.  Stage 2
drops that extractor, freezes the embedder and fits the encoder with the
triplet loss on (marked, augmented marked, other marked) images.  Stage 3
fine-tunes the encoder together with a fresh decoder and extractor so that
watermarks are read back through the invariant domain.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from invmark import objectives as obj
from invmark.augmentation import CompoundAugmentConfig, NoiseSpec, attack_batch, augment_batch
from invmark.checkpoint import Checkpoint
from invmark.codec import Decoder, Encoder
from invmark.data import assign_watermarks, batches
from invmark.embedder import build_embedder, embedding_residual
from invmark.errors import CheckpointError, ConfigError, NumericError
from invmark.extractor import Extractor, threshold_bits
from invmark.tensor_core import ModelConfig, init_parameters, parameter_digest, set_trainable

log = logging.getLogger(__name__)

PREREQUISITE = {"stage1": "init", "stage2": "stage1", "stage3": "stage2"}


@dataclass
class TrainingConfig:
    lr: float = 1e-4
    lr_decay: float = 0.95
    epoch_steps: int | None = None
    batch_size: int = 32
    stage1_steps: int = 5000
    stage2_steps: int = 2000
    stage3_steps: int = 3000
    emb_weight: float = 1.0
    ext_weight: float = 1.0
    margin: float = 1.0
    triplet_weight: float = 0.0
    seed: int = 0
    log_every: int = 50
    eval_repeats: int = 4
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epoch_steps is not None and self.epoch_steps < 1:
            raise ConfigError("epoch_steps must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null")
        obj.TrainingLossConfig(self.margin, self.triplet_weight)

    def steps_for(self, stage: str) -> int:
        return {"stage1": self.stage1_steps, "stage2": self.stage2_steps, "stage3": self.stage3_steps}[stage]

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- networks


@dataclass
class Networks:
    """The four networks plus the stage they were last trained to."""

    cfg: ModelConfig
    embedder: nn.Module
    extractor: Extractor | None = None
    encoder: Encoder | None = None
    decoder: Decoder | None = None
    stage: str = "init"

    def modules(self) -> dict[str, nn.Module]:
        named = {"embedder": self.embedder, "extractor": self.extractor, "encoder": self.encoder, "decoder": self.decoder}
        return {k: v for k, v in named.items() if v is not None}

    def uses_domain(self) -> bool:
        return self.encoder is not None and self.decoder is not None and self.extractor is not None

    def to_checkpoint(self, **fields) -> Checkpoint:
        ckpt = Checkpoint(model_config=self.cfg, stage=self.stage, **fields)
        for prefix, module in self.modules().items():
            ckpt.put_module(prefix, module)
        return ckpt

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Networks":
        cfg = ckpt.model_config
        present = ckpt.networks()
        nets = cls(cfg=cfg, embedder=build_embedder(cfg), stage=ckpt.stage)
        ckpt.load_module("embedder", nets.embedder)
        if "extractor" in present:
            nets.extractor = ckpt.load_module("extractor", Extractor(cfg))
        if "encoder" in present:
            nets.encoder = ckpt.load_module("encoder", Encoder(cfg))
        if "decoder" in present:
            nets.decoder = ckpt.load_module("decoder", Decoder(cfg))
        if ckpt.stage == "stage3" and not nets.uses_domain():
            raise CheckpointError("stage3 checkpoint lacks encoder/decoder/extractor")
        if ckpt.stage == "stage1" and nets.extractor is None:
            raise CheckpointError("stage1 checkpoint lacks an extractor")
        return nets

    def eval(self) -> "Networks":
        for m in self.modules().values():
            m.eval()
        return self

    @torch.no_grad()
    def embed(self, covers: torch.Tensor, wms: torch.Tensor) -> torch.Tensor:
        return self.embedder(covers, wms.to(covers.dtype))

    def read_logits(self, images: torch.Tensor, training: bool = False, generator=None) -> torch.Tensor:
        """Extractor output, routed through encoder and decoder once those exist."""
        if self.extractor is None:
            raise CheckpointError(f"{self.stage} networks have no extractor")
        x = images
        if self.uses_domain():
            x = self.decoder(self.encoder(x))
        return self.extractor(x, training=training, generator=generator)

    @torch.no_grad()
    def read_bits(self, images: torch.Tensor) -> torch.Tensor:
        return threshold_bits(self.read_logits(images))


def init_networks(cfg: ModelConfig, seed: int) -> Networks:
    gen = torch.Generator().manual_seed(seed)
    embedder = build_embedder(cfg)
    init_parameters(embedder, gen)
    extractor = Extractor(cfg)
    init_parameters(extractor, gen)
    return Networks(cfg=cfg, embedder=embedder, extractor=extractor, stage="init")


def _fresh(module: nn.Module, seed: int) -> nn.Module:
    init_parameters(module, torch.Generator().manual_seed(seed))
    return module


# ---------------------------------------------------------------- triplets


@dataclass
class TripletBatch:
    covers: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    watermarks: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    marked: tuple[torch.Tensor, torch.Tensor, torch.Tensor]


def make_triplet(covers: torch.Tensor, wms: torch.Tensor, embedder: nn.Module,
                 aug_cfg: CompoundAugmentConfig, rng: np.random.Generator) -> TripletBatch:
    """Anchor = marked cover; positive = compound-augmented anchor; negative = batch rotated by one."""
    if covers.shape[0] < 2:
        raise ConfigError("triplet construction needs a batch of at least 2 images")
    with torch.no_grad():
        m_a = embedder(covers, wms.to(covers.dtype))
    m_p = augment_batch(m_a, aug_cfg, rng)
    c_n, w_n, m_n = (torch.roll(t, shifts=-1, dims=0) for t in (covers, wms, m_a))
    return TripletBatch(
        covers=(covers, covers, c_n),
        watermarks=(wms, wms, w_n),
        marked=(m_a, m_p, m_n),
    )


# ---------------------------------------------------------------- training loop


@dataclass
class StageResult:
    networks: Networks
    log: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)

    def checkpoint(self, train_cfg: TrainingConfig, aug_cfg: CompoundAugmentConfig | None = None) -> Checkpoint:
        meta = {"training_config": train_cfg.to_dict()}
        if aug_cfg is not None:
            meta["augment_config"] = aug_cfg.to_dict()
        return self.networks.to_checkpoint(rng_state=self.rng_state, metrics=self.metrics, meta=meta)


def _rng_state(np_rng: np.random.Generator, gen: torch.Generator) -> dict:
    return {"numpy": np_rng.bit_generator.state, "torch": gen.get_state().numpy().tolist()}


def _stage_seed(seed: int, stage: str) -> int:
    return seed * 1000 + int(stage[-1])


class _Schedule:
    """Adam with a multiplicative decay applied every ``epoch_steps`` optimizer steps."""

    def __init__(self, params, train_cfg: TrainingConfig, n_images: int):
        self.params = list(params)
        self.opt = torch.optim.Adam(self.params, lr=train_cfg.lr)
        self.clip = train_cfg.grad_clip
        self.epoch_steps = train_cfg.epoch_steps or max(1, n_images // min(train_cfg.batch_size, n_images))
        self.decay = train_cfg.lr_decay
        self.steps = 0

    @property
    def lr(self) -> float:
        return self.opt.param_groups[0]["lr"]

    def step(self, loss: torch.Tensor) -> None:
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        if self.clip is not None:
            nn.utils.clip_grad_norm_(self.params, self.clip)
        self.opt.step()
        self.steps += 1
        if self.steps % self.epoch_steps == 0:
            for group in self.opt.param_groups:
                group["lr"] *= self.decay


def _check_loss(loss: torch.Tensor, stage: str, step: int, last: float | None) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericError(f"{stage} diverged at step {step}: loss={value} (last finite loss {last})")
    return value


def _prepare(images) -> torch.Tensor:
    return torch.as_tensor(np.asarray(images, dtype=np.float32))


def _require(nets: Networks, stage: str) -> None:
    need = PREREQUISITE[stage]
    if nets.stage != need:
        raise CheckpointError(f"{stage} needs a {need} checkpoint, got {nets.stage}")


def stage1_pretrain(nets: Networks, images, train_cfg: TrainingConfig, progress=None) -> StageResult:
    """Joint embedder/extractor training on clean images (embedding MSE + bit MSE)."""
    _require(nets, "stage1")
    cfg = nets.cfg
    covers = _prepare(images)
    rng = np.random.default_rng(_stage_seed(train_cfg.seed, "stage1"))
    gen = torch.Generator().manual_seed(_stage_seed(train_cfg.seed, "stage1"))
    embedder, extractor = nets.embedder, nets.extractor
    for m in (embedder, extractor):
        set_trainable(m, True)
        m.train()
    sched = _Schedule([*embedder.parameters(), *extractor.parameters()], train_cfg, len(covers))
    history, last = [], None
    sampler = batches(len(covers), train_cfg.batch_size, rng)
    for step in range(train_cfg.stage1_steps):
        idx = next(sampler)
        c = covers[idx]
        w = torch.from_numpy(assign_watermarks(covers[idx].numpy(), rng, cfg.wm_size)).float()
        m = embedder(c, w)
        w_hat = extractor(m, training=True, generator=gen)
        l_emb = obj.embedder_loss(c, m)
        l_ext = obj.extractor_pretrain_loss(w, w_hat)
        loss = train_cfg.emb_weight * l_emb + train_cfg.ext_weight * l_ext
        last = _check_loss(loss, "stage1", step, last)
        sched.step(loss)
        if step % train_cfg.log_every == 0 or step == train_cfg.stage1_steps - 1:
            row = {"step": step, "loss": last, "emb": float(l_emb.detach()), "ext": float(l_ext.detach()), "lr": sched.lr}
            history.append(row)
            if progress:
                progress("stage1", row)
    nets.stage = "stage1"
    nets.eval()
    return StageResult(nets, history, rng_state=_rng_state(rng, gen))


def stage2_train_encoder(nets: Networks, images, train_cfg: TrainingConfig,
                         aug_cfg: CompoundAugmentConfig, progress=None) -> StageResult:
    """Drop the stage-1 extractor, freeze the embedder and fit the encoder with the triplet loss."""
    _require(nets, "stage2")
    aug_cfg.validate()
    cfg = nets.cfg
    covers = _prepare(images)
    seed = _stage_seed(train_cfg.seed, "stage2")
    rng = np.random.default_rng([seed, aug_cfg.seed])
    gen = torch.Generator().manual_seed(seed)
    nets.extractor = None
    set_trainable(nets.embedder, False)
    nets.embedder.eval()
    frozen = parameter_digest(nets.embedder)
    nets.encoder = _fresh(Encoder(cfg), seed)
    nets.encoder.train()
    sched = _Schedule(nets.encoder.parameters(), train_cfg, len(covers))
    history, last = [], None
    sampler = batches(len(covers), max(2, train_cfg.batch_size), rng)
    for step in range(train_cfg.stage2_steps):
        idx = next(sampler)
        c = covers[idx]
        w = torch.from_numpy(assign_watermarks(c.numpy(), rng, cfg.wm_size)).float()
        t = make_triplet(c, w, nets.embedder, aug_cfg, rng)
        ids = nets.encoder(torch.cat(t.marked))
        id_a, id_p, id_n = ids.chunk(3)
        loss = obj.triplet_loss(id_a, id_p, id_n, train_cfg.margin)
        last = _check_loss(loss, "stage2", step, last)
        sched.step(loss)
        if step % train_cfg.log_every == 0 or step == train_cfg.stage2_steps - 1:
            with torch.no_grad():
                d_ap = float(obj.token_distance(id_a, id_p).mean())
                d_an = float(obj.token_distance(id_a, id_n).mean())
            row = {"step": step, "loss": last, "d_ap": d_ap, "d_an": d_an, "lr": sched.lr}
            history.append(row)
            if progress:
                progress("stage2", row)
    if parameter_digest(nets.embedder) != frozen:
        raise RuntimeError("embedder parameters changed while frozen")
    nets.stage = "stage2"
    nets.eval()
    return StageResult(nets, history, metrics={"embedder_digest": frozen}, rng_state=_rng_state(rng, gen))


def stage3_finetune(nets: Networks, images, train_cfg: TrainingConfig,
                    aug_cfg: CompoundAugmentConfig, progress=None) -> StageResult:
    """Fine-tune the encoder with a fresh decoder and extractor on the triplet watermark MSE."""
    _require(nets, "stage3")
    aug_cfg.validate()
    cfg = nets.cfg
    covers = _prepare(images)
    seed = _stage_seed(train_cfg.seed, "stage3")
    rng = np.random.default_rng([seed, aug_cfg.seed])
    gen = torch.Generator().manual_seed(seed)
    set_trainable(nets.embedder, False)
    nets.embedder.eval()
    frozen = parameter_digest(nets.embedder)
    nets.decoder = _fresh(Decoder(cfg), seed)
    nets.extractor = _fresh(Extractor(cfg), seed + 1)
    trainable = [nets.encoder, nets.decoder, nets.extractor]
    for m in trainable:
        set_trainable(m, True)
        m.train()
    sched = _Schedule([p for m in trainable for p in m.parameters()], train_cfg, len(covers))
    history, last = [], None
    sampler = batches(len(covers), max(2, train_cfg.batch_size), rng)
    for step in range(train_cfg.stage3_steps):
        idx = next(sampler)
        c = covers[idx]
        w = torch.from_numpy(assign_watermarks(c.numpy(), rng, cfg.wm_size)).float()
        t = make_triplet(c, w, nets.embedder, aug_cfg, rng)
        ids = nets.encoder(torch.cat(t.marked))
        logits = nets.extractor(nets.decoder(ids), training=True, generator=gen)
        loss = obj.extractor_final_loss(t.watermarks, logits.chunk(3))
        if train_cfg.triplet_weight > 0:
            loss = loss + train_cfg.triplet_weight * obj.triplet_loss(*ids.chunk(3), train_cfg.margin)
        last = _check_loss(loss, "stage3", step, last)
        sched.step(loss)
        if step % train_cfg.log_every == 0 or step == train_cfg.stage3_steps - 1:
            row = {"step": step, "loss": last, "lr": sched.lr}
            history.append(row)
            if progress:
                progress("stage3", row)
    if parameter_digest(nets.embedder) != frozen:
        raise RuntimeError("embedder parameters changed while frozen")
    nets.stage = "stage3"
    nets.eval()
    return StageResult(nets, history, metrics={"embedder_digest": frozen}, rng_state=_rng_state(rng, gen))


# ---------------------------------------------------------------- evaluation


def _chunks(n: int, size: int = 16):
    for lo in range(0, n, size):
        yield slice(lo, min(n, lo + size))


def quantize(images: torch.Tensor) -> torch.Tensor:
    """Round-trip through 8-bit storage."""
    return torch.round(images.clamp(0, 1) * 255.0) / 255.0


@torch.no_grad()
def evaluate(nets: Networks, images, noises=(), seed: int = 0) -> obj.MetricReport:
    """PSNR(cover, marked) and BRR of the clean and attacked read-back.

    Marked images are quantized to 8 bits before any attack, as if saved to a
    lossless file.  Per-noise PSNR compares the attacked image to the marked one.
    """
    nets.eval()
    cfg = nets.cfg
    covers = _prepare(images)
    n = len(covers)
    wms = torch.from_numpy(assign_watermarks(covers.numpy(), np.random.default_rng(seed), cfg.wm_size))
    marked = torch.cat([quantize(nets.embed(covers[s], wms[s])) for s in _chunks(n)])
    psnrs = [obj.psnr(covers[i], marked[i]) for i in range(n)]
    clean_bits = torch.cat([nets.read_bits(marked[s]) for s in _chunks(n)])
    report = obj.MetricReport(
        psnr_db=float(np.mean(psnrs)),
        brr_percent=obj.brr(wms.numpy(), clean_bits.numpy()),
        n_images=n,
        meta={"stage": nets.stage, "embedder": cfg.embedder, "seed": seed},
    )
    for spec in noises:
        rng = np.random.default_rng([seed, hash_noise(spec)])
        attacked = attack_batch(marked, spec, rng)
        bits = torch.cat([nets.read_bits(attacked[s]) for s in _chunks(n)])
        report.entries.append(obj.NoiseResult(
            noise=spec.name,
            level=None if spec.name == "hist_eq" else spec.level,
            brr_percent=obj.brr(wms.numpy(), bits.numpy()),
            psnr_db=float(np.mean([obj.psnr(marked[i], attacked[i]) for i in range(n)])),
            n_images=n,
        ))
    return report


def hash_noise(spec: NoiseSpec) -> int:
    """Stable per-attack seed component (Python's ``hash`` is salted per process)."""
    text = str(spec).encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:4], "little")


@torch.no_grad()
def augmented_brr(nets: Networks, images, aug_cfg: CompoundAugmentConfig, seed: int = 0, repeats: int = 4) -> float:
    """BRR when each marked image is compound-augmented ``repeats`` times."""
    nets.eval()
    cfg = nets.cfg
    covers = _prepare(images)
    wms = torch.from_numpy(assign_watermarks(covers.numpy(), np.random.default_rng(seed), cfg.wm_size))
    marked = quantize(nets.embed(covers, wms))
    rng = np.random.default_rng([seed, aug_cfg.seed, 7])
    hits = total = 0
    for _ in range(repeats):
        aug = augment_batch(marked, aug_cfg, rng)
        bits = nets.read_bits(aug)
        hits += obj.matching_bits(wms.numpy(), bits.numpy())
        total += wms.numel()
    return 100.0 * hits / total


@dataclass
class AblationResult:
    clean_without_domain: float
    clean_with_domain: float
    augmented_without_domain: float
    augmented_with_domain: float

    @property
    def gain(self) -> float:
        return self.augmented_with_domain - self.augmented_without_domain

    def to_dict(self) -> dict:
        return {**asdict(self), "gain": self.gain}


def ablate_invariant_domain(stage1: Networks, stage3: Networks, images, aug_cfg: CompoundAugmentConfig,
                            seed: int = 0, repeats: int = 4) -> AblationResult:
    """Read augmented marked images with the stage-1 extractor versus the full invariant-domain path."""
    if stage1.stage != "stage1" or stage3.stage != "stage3":
        raise CheckpointError(f"need stage1 and stage3 networks, got {stage1.stage} and {stage3.stage}")
    if parameter_digest(stage1.embedder) != parameter_digest(stage3.embedder):
        raise CheckpointError("stage1 and stage3 checkpoints do not share an embedder")
    return AblationResult(
        clean_without_domain=evaluate(stage1, images, seed=seed).brr_percent,
        clean_with_domain=evaluate(stage3, images, seed=seed).brr_percent,
        augmented_without_domain=augmented_brr(stage1, images, aug_cfg, seed, repeats),
        augmented_with_domain=augmented_brr(stage3, images, aug_cfg, seed, repeats),
    )


@dataclass
class EmbedderComparison:
    cross: obj.MetricReport
    conv: obj.MetricReport
    cross_residual: dict
    conv_residual: dict

    def to_dict(self) -> dict:
        return {
            "cross": self.cross.to_dict(),
            "conv": self.conv.to_dict(),
            "cross_residual": self.cross_residual,
            "conv_residual": self.conv_residual,
            "psnr_gap_db": self.cross.psnr_db - self.conv.psnr_db,
        }


@torch.no_grad()
def residual_stats(nets: Networks, images, seed: int = 0) -> dict:
    """How spread out the embedding change is: mean normalized residual and share of pixels above 0.25."""
    covers = _prepare(images)
    wms = torch.from_numpy(assign_watermarks(covers.numpy(), np.random.default_rng(seed), nets.cfg.wm_size))
    marked = quantize(nets.embed(covers, wms))
    maps = [embedding_residual(covers[i], marked[i]) for i in range(len(covers))]
    return {
        "mean_residual": float(np.mean([m.mean() for m in maps])),
        "active_fraction": float(np.mean([(m > 0.25).double().mean() for m in maps])),
        "mean_abs_change_8bit": float(np.mean([(m_ - c_).abs().mean() * 255 for m_, c_ in zip(marked, covers)])),
    }


def ablate_cross_vs_conv(model_cfg: ModelConfig, train_images, eval_images, train_cfg: TrainingConfig,
                         progress=None) -> tuple[EmbedderComparison, Networks, Networks]:
    """Stage-1 train both embedder kinds with the same budget and compare on ``eval_images``."""
    arms = {}
    for kind in ("cross", "conv"):
        cfg = ModelConfig(**{**model_cfg.to_dict(), "embedder": kind})
        nets = init_networks(cfg, train_cfg.seed)
        arms[kind] = stage1_pretrain(nets, train_images, train_cfg, progress).networks
    cmp = EmbedderComparison(
        cross=evaluate(arms["cross"], eval_images, seed=train_cfg.seed),
        conv=evaluate(arms["conv"], eval_images, seed=train_cfg.seed),
        cross_residual=residual_stats(arms["cross"], eval_images, train_cfg.seed),
        conv_residual=residual_stats(arms["conv"], eval_images, train_cfg.seed),
    )
    return cmp, arms["cross"], arms["conv"]
