"""Optimization loop for the inversion network over a frozen backbone.

Only the inversion network (query bank included) trains; backbone features
are computed once per image and cached. Each step inverts a batch of images,
renders the pseudo-token templates, and minimizes

    total = contrastive + orthogonality + lambda_reg * caption_regularizer

with AdamW under a step learning-rate decay. Checkpoints are .npz archives of
named parameter arrays, optimizer state, RNG states, and a flat config
snapshot, so a resumed run reproduces the uninterrupted loss trajectory
exactly.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as configmod
from . import textgen
from .backbone import Backbone, load_backbone
from .captions import CaptionSource
from .errors import ConfigError, DataError, FormatError
from .inversion import FilterConfig, InversionConfig, InversionNetwork
from .losses import LossWeights, contrastive_loss, orthogonal_loss, total_loss, triwise_loss

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp")

METRICS_HEADER = ("step", "l_sim", "l_ortho", "l_subj", "l_attr", "l_whole",
                  "total", "mean_r")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; see config.DEFAULTS for the file keys."""

    lr: float = 4e-5
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int = 10
    batch_size: int = 256
    epochs: int = 20
    max_steps: int = 0
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 1
    log_every: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    filter: FilterConfig = field(default_factory=FilterConfig)
    ablations: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("train.lr must be >= 0")
        if self.lr_decay_factor <= 0:
            raise ConfigError("train.lr_decay_factor must be positive")
        if self.lr_decay_epoch < 1:
            raise ConfigError("train.lr_decay_epoch must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("train.max_steps must be >= 0")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint/log intervals must be >= 1")
        textgen.validate_ablations(self.ablations)

    @classmethod
    def from_flat(cls, cfg: dict[str, str]) -> "TrainConfig":
        return cls(
            lr=configmod.get_float(cfg, "train.lr"),
            lr_decay_factor=configmod.get_float(cfg, "train.lr_decay_factor"),
            lr_decay_epoch=configmod.get_int(cfg, "train.lr_decay_epoch"),
            batch_size=configmod.get_int(cfg, "train.batch_size"),
            epochs=configmod.get_int(cfg, "train.epochs"),
            max_steps=configmod.get_int(cfg, "train.max_steps"),
            seed=configmod.get_int(cfg, "train.seed"),
            weight_decay=configmod.get_float(cfg, "train.weight_decay"),
            beta1=configmod.get_float(cfg, "train.beta1"),
            beta2=configmod.get_float(cfg, "train.beta2"),
            eps=configmod.get_float(cfg, "train.eps"),
            checkpoint_every=configmod.get_int(cfg, "train.checkpoint_every"),
            log_every=configmod.get_int(cfg, "train.log_every"),
            weights=LossWeights.from_flat(cfg),
            filter=FilterConfig.from_flat(cfg),
            ablations=frozenset(configmod.get_str_list(cfg, "train.ablations")),
        )

    def to_flat(self) -> dict[str, str]:
        flat = {
            "train.lr": repr(self.lr),
            "train.lr_decay_factor": repr(self.lr_decay_factor),
            "train.lr_decay_epoch": str(self.lr_decay_epoch),
            "train.batch_size": str(self.batch_size),
            "train.epochs": str(self.epochs),
            "train.max_steps": str(self.max_steps),
            "train.seed": str(self.seed),
            "train.weight_decay": repr(self.weight_decay),
            "train.beta1": repr(self.beta1),
            "train.beta2": repr(self.beta2),
            "train.eps": repr(self.eps),
            "train.checkpoint_every": str(self.checkpoint_every),
            "train.log_every": str(self.log_every),
            "train.ablations": ",".join(sorted(self.ablations)),
        }
        flat.update(self.weights.to_flat())
        flat.update(self.filter.to_flat())
        return flat

    def effective_filter(self, n_attrs: int) -> FilterConfig:
        """Filter actually applied, honoring the no_filter ablation."""
        if "no_filter" in self.ablations:
            return FilterConfig(k=n_attrs, epsilon=-1.0)
        return self.filter.validate_for(n_attrs)


def learning_rate_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: the base rate until lr_decay_epoch (1-based), then scaled."""
    if epoch < 1:
        raise ConfigError("epochs are 1-based")
    if epoch >= cfg.lr_decay_epoch:
        return cfg.lr * cfg.lr_decay_factor
    return cfg.lr


class TrainingData:
    """Image directory plus caption source, with cached frozen features."""

    def __init__(self, image_dir: str | Path, captions: CaptionSource,
                 backbone: Backbone, tagger=None):
        self.image_dir = Path(image_dir)
        self.captions = captions
        self.backbone = backbone
        self.tagger = tagger or textgen.LexiconTagger()
        if not self.image_dir.is_dir():
            raise DataError(f"image directory {self.image_dir} does not exist")
        self.ids = sorted(
            p.stem for p in self.image_dir.iterdir()
            if p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not self.ids:
            raise DataError(f"no training images found in {self.image_dir}")
        self._paths = {
            p.stem: p for p in self.image_dir.iterdir()
            if p.suffix.lower() in IMAGE_EXTENSIONS
        }
        self._features: dict[str, object] = {}
        self._splits: dict[str, textgen.CaptionSplit] = {}
        self._base_embeds: dict[str, torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self.ids)

    def image_path(self, image_id: str) -> Path:
        if image_id not in self._paths:
            raise DataError(f"unknown image id {image_id!r}")
        return self._paths[image_id]

    def features(self, image_id: str):
        if image_id not in self._features:
            self._features[image_id] = self.backbone.encode_image(
                self.image_path(image_id)
            )
        return self._features[image_id]

    def split(self, image_id: str) -> textgen.CaptionSplit:
        if image_id not in self._splits:
            caption = self.captions.get(image_id)  # raises before any update
            self._splits[image_id] = textgen.split_caption(caption, self.tagger)
        return self._splits[image_id]

    def base_embed(self, image_id: str) -> torch.Tensor:
        """Cached text embedding of the standardized caption (no slots)."""
        if image_id not in self._base_embeds:
            seq = textgen.standardized_caption(
                self.split(image_id), self.backbone.tokenizer,
                self.backbone.config.max_text_len,
            )
            with torch.no_grad():
                self._base_embeds[image_id] = self.backbone.encode_text(seq)
        return self._base_embeds[image_id]


@dataclass
class StepMetrics:
    step: int
    l_sim: float
    l_ortho: float
    l_subj: float
    l_attr: float
    l_whole: float
    total: float
    mean_r: float
    r_values: list[int] = field(default_factory=list)

    def tsv_row(self) -> str:
        return "\t".join([
            str(self.step),
            f"{self.l_sim:.6f}", f"{self.l_ortho:.6f}", f"{self.l_subj:.6f}",
            f"{self.l_attr:.6f}", f"{self.l_whole:.6f}", f"{self.total:.6f}",
            f"{self.mean_r:.3f}",
        ])


def train_step(
    network: InversionNetwork,
    backbone: Backbone,
    data: TrainingData,
    batch_ids: list[str],
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer,
    step: int,
) -> StepMetrics:
    """One optimization step over a batch of image ids.

    Caption lookups happen before the forward pass, so a missing caption
    aborts the step with no parameter update.
    """
    if not batch_ids:
        raise DataError("empty training batch")
    ablations = cfg.ablations
    eff_filter = cfg.effective_filter(network.config.n_attrs)
    tokenizer = backbone.tokenizer
    max_len = backbone.config.max_text_len

    samples = [(data.features(i), data.split(i), data.base_embed(i))
               for i in batch_ids]

    image_embeds = []
    query_embeds = []
    ortho_terms = []
    subj_terms = []
    attr_terms = []
    whole_terms = []
    r_values = []
    zero = None
    for feats, split, base_embed in samples:
        pseudo = network.invert(feats, eff_filter)
        r_values.append(pseudo.num_attributes)
        if zero is None:
            zero = torch.zeros((), dtype=pseudo.subject.dtype)
        image_embeds.append(feats.global_embed.to(pseudo.subject.dtype))
        seq = textgen.image_template(pseudo, tokenizer, max_len, ablations)
        query_embeds.append(backbone.encode_text(seq))
        if "no_ortho" not in ablations:
            ortho_terms.append(orthogonal_loss(pseudo.topk_features))
        bundle = textgen.derivatives(split, pseudo, tokenizer, max_len, ablations)
        t_s = (backbone.encode_text(bundle.subject_swapped)
               if bundle.subject_swapped is not None else None)
        t_a = (backbone.encode_text(bundle.attributes_swapped)
               if bundle.attributes_swapped is not None else None)
        t_sa = backbone.encode_text(bundle.both_swapped)
        l_subj, l_attr, l_whole, _ = triwise_loss(
            base_embed.to(pseudo.subject.dtype), t_s, t_a, t_sa
        )
        if "no_subject_reg" not in ablations:
            subj_terms.append(l_subj)
        if "no_attribute_reg" not in ablations:
            attr_terms.append(l_attr)
        if "no_whole_reg" not in ablations:
            whole_terms.append(l_whole)

    def mean_or_zero(terms):
        return torch.stack(terms).mean() if terms else zero

    l_sim = contrastive_loss(
        torch.stack(image_embeds), torch.stack(query_embeds), cfg.weights.tau
    )
    l_ortho = mean_or_zero(ortho_terms)
    l_subj_m = mean_or_zero(subj_terms)
    l_attr_m = mean_or_zero(attr_terms)
    l_whole_m = mean_or_zero(whole_terms)
    tri = l_subj_m + l_attr_m + l_whole_m
    total = total_loss(l_sim, l_ortho, tri, cfg.weights)

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    return StepMetrics(
        step=step,
        l_sim=float(l_sim.detach()), l_ortho=float(l_ortho.detach()),
        l_subj=float(l_subj_m.detach()), l_attr=float(l_attr_m.detach()),
        l_whole=float(l_whole_m.detach()), total=float(total.detach()),
        mean_r=sum(r_values) / len(r_values), r_values=r_values,
    )


# ----- checkpointing -------------------------------------------------------


def _optimizer_payload(optimizer: torch.optim.Optimizer):
    """Split optimizer state into (json-able meta, tensor arrays)."""
    sd = optimizer.state_dict()
    arrays: dict[str, np.ndarray] = {}
    state_meta: dict[str, dict[str, object]] = {}
    for idx, entry in sd["state"].items():
        fields: dict[str, object] = {}
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                arrays[f"opt/{idx}/{key}"] = value.detach().cpu().numpy()
                fields[key] = "__tensor__"
            else:
                fields[key] = value
        state_meta[str(idx)] = fields
    groups = []
    for group in sd["param_groups"]:
        clean = dict(group)
        if isinstance(clean.get("betas"), tuple):
            clean["betas"] = list(clean["betas"])
        groups.append(clean)
    return {"state": state_meta, "param_groups": groups}, arrays


def save_checkpoint(
    path: str | Path,
    network: InversionNetwork,
    optimizer: torch.optim.Optimizer | None,
    *,
    epoch: int,
    step: int,
    config_snapshot: dict[str, str],
    shuffle_rng: np.random.Generator | None = None,
):
    """Write a versioned .npz checkpoint (atomic: temp file then rename)."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    param_names = []
    for name, param in network.named_parameters():
        param_names.append(name)
        arrays[f"param/{name}"] = param.detach().cpu().numpy()
    opt_meta = None
    if optimizer is not None:
        opt_meta, opt_arrays = _optimizer_payload(optimizer)
        arrays.update(opt_arrays)
    arrays["rng/torch"] = torch.get_rng_state().numpy()
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "epoch": epoch,
        "step": step,
        "config": config_snapshot,
        "param_names": param_names,
        "optimizer": opt_meta,
        "shuffle_rng": (
            shuffle_rng.bit_generator.state if shuffle_rng is not None else None
        ),
        "saved_unix_ms": int(time.time() * 1000),
    }
    arrays["meta/json"] = np.frombuffer(
        json.dumps(meta).encode("utf-8"), dtype=np.uint8
    )
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class CheckpointPayload:
    flat_config: dict[str, str]
    epoch: int
    step: int
    network: InversionNetwork
    optimizer_meta: dict | None
    optimizer_arrays: dict[str, np.ndarray]
    torch_rng: np.ndarray | None
    shuffle_rng_state: dict | None


def load_checkpoint(path: str | Path,
                    dtype: torch.dtype = torch.float32) -> CheckpointPayload:
    """Load a checkpoint and rebuild the inversion network from its snapshot."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint {path} does not exist")
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta/json" not in archive:
        raise FormatError(f"checkpoint {path} has no metadata record")
    meta = json.loads(bytes(archive["meta/json"]).decode("utf-8"))
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(
            f"unsupported checkpoint format version {version!r} in {path}"
        )
    flat = dict(configmod.DEFAULTS)
    flat.update(meta["config"])
    from .backbone import BackboneConfig  # local import to avoid cycle noise

    backbone_cfg = BackboneConfig.from_flat(flat)
    inv_cfg = InversionConfig.from_flat(flat, backbone_cfg)
    network = InversionNetwork(inv_cfg, dtype=dtype)
    params = dict(network.named_parameters())
    for name in meta["param_names"]:
        key = f"param/{name}"
        if key not in archive:
            raise FormatError(f"checkpoint {path} is missing array {key}")
        if name not in params:
            raise FormatError(f"checkpoint parameter {name} not in network")
        with torch.no_grad():
            tensor = torch.from_numpy(archive[key].copy())
            if tensor.shape != params[name].shape:
                raise FormatError(
                    f"checkpoint parameter {name} has shape {tuple(tensor.shape)}, "
                    f"expected {tuple(params[name].shape)}"
                )
            params[name].copy_(tensor.to(dtype))
    opt_arrays = {
        key: archive[key] for key in archive.files if key.startswith("opt/")
    }
    torch_rng = archive["rng/torch"] if "rng/torch" in archive else None
    return CheckpointPayload(
        flat_config=flat,
        epoch=int(meta["epoch"]),
        step=int(meta["step"]),
        network=network,
        optimizer_meta=meta.get("optimizer"),
        optimizer_arrays=opt_arrays,
        torch_rng=torch_rng,
        shuffle_rng_state=meta.get("shuffle_rng"),
    )


def restore_optimizer(optimizer: torch.optim.Optimizer,
                      payload: CheckpointPayload):
    """Load saved moment estimates and param groups into a fresh optimizer."""
    if payload.optimizer_meta is None:
        return
    state: dict[int, dict[str, object]] = {}
    for idx_str, fields in payload.optimizer_meta["state"].items():
        entry: dict[str, object] = {}
        for key, value in fields.items():
            if value == "__tensor__":
                arr = payload.optimizer_arrays[f"opt/{idx_str}/{key}"]
                entry[key] = torch.from_numpy(arr.copy())
            else:
                entry[key] = value
        state[int(idx_str)] = entry
    groups = []
    for group in payload.optimizer_meta["param_groups"]:
        clean = dict(group)
        if isinstance(clean.get("betas"), list):
            clean["betas"] = tuple(clean["betas"])
        groups.append(clean)
    optimizer.load_state_dict({"state": state, "param_groups": groups})


def load_inversion_runtime(
    path: str | Path, dtype: torch.dtype = torch.float32
) -> tuple[Backbone, InversionNetwork, CheckpointPayload]:
    """Rebuild (backbone, trained network) from a checkpoint for inference."""
    payload = load_checkpoint(path, dtype=dtype)
    backbone = load_backbone(payload.flat_config, dtype=dtype)
    payload.network.eval()
    return backbone, payload.network, payload


# ----- the fit loop --------------------------------------------------------


def _batches(ids: list[str], batch_size: int,
             rng: np.random.Generator) -> list[list[str]]:
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return [shuffled[i:i + batch_size]
            for i in range(0, len(shuffled), batch_size)]


def fit(
    data: TrainingData,
    inv_cfg: InversionConfig,
    cfg: TrainConfig,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
    extra_snapshot: dict[str, str] | None = None,
) -> tuple[InversionNetwork, list[StepMetrics]]:
    """Train the inversion network, logging metrics and writing checkpoints.

    Layout under ``out_dir``: metrics.tsv (one row per step), r_hist.tsv
    (per-epoch histogram of retained attribute counts), checkpoint_epoch_NNN.npz
    every ``checkpoint_every`` epochs, checkpoint_final.npz at the end.
    """
    if len(data) == 0:
        raise DataError("training dataset is empty")
    cfg.effective_filter(inv_cfg.n_attrs)  # validate k<=n before any work
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    backbone = data.backbone

    snapshot = dict(extra_snapshot or {})
    snapshot.update(backbone.config.to_flat())
    snapshot.update(inv_cfg.to_flat())
    snapshot.update(cfg.to_flat())

    start_epoch = 1
    global_step = 0
    shuffle_rng = np.random.default_rng(cfg.seed)
    if resume_from is None:
        torch.manual_seed(cfg.seed)
        network = InversionNetwork(inv_cfg, seed=cfg.seed)
        optimizer = torch.optim.AdamW(
            network.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
            eps=cfg.eps, weight_decay=cfg.weight_decay,
        )
    else:
        payload = load_checkpoint(resume_from)
        network = payload.network
        optimizer = torch.optim.AdamW(
            network.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
            eps=cfg.eps, weight_decay=cfg.weight_decay,
        )
        restore_optimizer(optimizer, payload)
        if payload.torch_rng is not None:
            torch.set_rng_state(torch.from_numpy(payload.torch_rng.copy()))
        if payload.shuffle_rng_state is not None:
            shuffle_rng.bit_generator.state = payload.shuffle_rng_state
        start_epoch = payload.epoch + 1
        global_step = payload.step
        logger.info("resumed from %s at epoch %d, step %d",
                    resume_from, payload.epoch, global_step)

    metrics_path = out_dir / "metrics.tsv"
    write_header = not metrics_path.exists() or resume_from is None
    metrics_fh = open(metrics_path, "w" if resume_from is None else "a",
                      encoding="utf-8")
    hist_path = out_dir / "r_hist.tsv"
    hist_fh = open(hist_path, "w" if resume_from is None else "a",
                   encoding="utf-8")
    history: list[StepMetrics] = []
    network.train()
    try:
        if write_header:
            metrics_fh.write("\t".join(METRICS_HEADER) + "\n")
            hist_fh.write("epoch\tr\tcount\n")
        stop = False
        epoch = start_epoch - 1
        for epoch in range(start_epoch, cfg.epochs + 1):
            lr = learning_rate_for_epoch(cfg, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            r_counter: Counter[int] = Counter()
            for batch_ids in _batches(data.ids, cfg.batch_size, shuffle_rng):
                global_step += 1
                metrics = train_step(
                    network, backbone, data, batch_ids, cfg, optimizer,
                    global_step,
                )
                history.append(metrics)
                r_counter.update(metrics.r_values)
                if global_step % cfg.log_every == 0:
                    metrics_fh.write(metrics.tsv_row() + "\n")
                    metrics_fh.flush()
                if cfg.max_steps and global_step >= cfg.max_steps:
                    stop = True
                    break
            for r in sorted(r_counter):
                hist_fh.write(f"{epoch}\t{r}\t{r_counter[r]}\n")
            hist_fh.flush()
            if epoch % cfg.checkpoint_every == 0 or stop or epoch == cfg.epochs:
                save_checkpoint(
                    out_dir / f"checkpoint_epoch_{epoch:03d}.npz",
                    network, optimizer, epoch=epoch, step=global_step,
                    config_snapshot=snapshot, shuffle_rng=shuffle_rng,
                )
            if stop:
                break
        save_checkpoint(
            out_dir / "checkpoint_final.npz", network, optimizer,
            epoch=min(cfg.epochs, epoch), step=global_step,
            config_snapshot=snapshot, shuffle_rng=shuffle_rng,
        )
    finally:
        metrics_fh.close()
        hist_fh.close()
    network.eval()
    return network, history
