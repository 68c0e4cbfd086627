"""Joint SOD/COD training loop, ablation presets and checkpoints.

One full step at iteration ``t`` (1-based):

a. the contrastive term is active when ``t % contrastive_period == 0``;
b. SOD generator update of alpha_s and beta (and theta when active);
c. COD generator update of alpha_c and beta (and theta when active);
d. SOD discriminator update of gamma_s;
e. COD discriminator update of gamma_c.

Data batches for step ``t`` come from an RNG keyed by ``(seed, t, stream)``,
so a resumed run sees exactly the batches an uninterrupted run would.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .adversarial import Discriminator, DiscriminatorConfig, discriminator_loss, generator_adv_loss, uncertainty_map
from .contrast import ContrastiveModule, batch_contrastive_loss, EMBED_CHANNELS
from .core import DataError, ImageTensor, Task, images_to_tensor, load_dataset, resize_tensor, rng_for
from .datapipe import (
    CROP_MODES,
    augment_sod_records,
    batch_multiscale,
    read_augmentation_manifest,
    snap32,
)
from .losses import structure_loss
from .model import EncoderConfig, Generator, TOY_CHANNELS

log = logging.getLogger(__name__)

GROUPS = ("alpha_s", "alpha_c", "beta", "theta", "gamma_s", "gamma_c")


@dataclass(frozen=True)
class Preset:
    tasks: tuple
    adversarial: bool = False
    contrastive: bool = False
    crop: bool = False
    augment_sod: bool = False


_JOINT = ("sod", "cod")
PRESETS = {
    "ssod": Preset(("sod",)),
    "asod": Preset(("sod",), augment_sod=True),
    "scod": Preset(("cod",)),
    "acod": Preset(("cod",), crop=True),
    "jsod1": Preset(_JOINT, crop=True, augment_sod=True),
    "jsod2": Preset(_JOINT, contrastive=True, crop=True, augment_sod=True),
    "jsod3": Preset(_JOINT, adversarial=True, crop=True, augment_sod=True),
    "full": Preset(_JOINT, adversarial=True, contrastive=True, crop=True, augment_sod=True),
}
# the joint ablations train one model that is scored on both task families
PRESETS.update({"jcod1": PRESETS["jsod1"], "jcod2": PRESETS["jsod2"], "jcod3": PRESETS["jsod3"]})


class TrainingDiverged(RuntimeError):
    pass


class IsolationError(AssertionError):
    pass


@dataclass
class TrainConfig:
    max_steps: int = 2000
    batch_size: int = 8
    bridge_batch_size: int | None = None
    lr_generator: float = 2e-5
    lr_discriminator: float = 2e-5
    lr_contrastive: float = 1.2e-5
    lambda_adv: float = 1.0
    lambda_ctrs: float = 0.1
    contrastive_period: int = 5
    preset: str = "full"
    seed: int = 0
    image_size: int = 352
    scales: tuple = (1.0,)
    backbone: str = "toy_backbone"
    channels: tuple = tuple(TOY_CHANNELS)
    pretrained_weights_path: str | None = None
    embed_channels: int = EMBED_CHANNELS
    disc_widths: tuple = (64, 64, 64, 64, 1)
    detach_masks: bool = True
    checkpoint_every: int = 0
    check_isolation: bool = False
    deterministic: bool = True

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.lambda_adv < 0 or self.lambda_ctrs < 0:
            raise ValueError("loss weights must be non-negative")
        if self.contrastive_period < 1:
            raise ValueError("contrastive_period must be >= 1")
        self.scales = tuple(float(s) for s in self.scales)
        self.channels = tuple(int(c) for c in self.channels)
        self.disc_widths = tuple(int(c) for c in self.disc_widths)

    @classmethod
    def paper(cls, **kw):
        """The published schedule: ResNet-50, 352 px multi-scale, batch 22, 30k steps."""
        base = dict(
            max_steps=30000,
            batch_size=22,
            image_size=352,
            scales=(0.75, 1.0, 1.25),
            backbone="paper_backbone",
            channels=(256, 512, 1024, 2048),
        )
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, **kw):
        """Toy-scale schedule that trains on a CPU in well under an hour."""
        base = dict(
            max_steps=2000,
            batch_size=8,
            image_size=64,
            scales=(1.0,),
            lr_generator=1e-3,
            lr_discriminator=1e-3,
            lr_contrastive=6e-4,
            disc_widths=(32, 32, 32, 32, 1),
        )
        base.update(kw)
        return cls(**base)

    @property
    def spec(self) -> Preset:
        return PRESETS[self.preset]

    def architecture(self):
        return {
            "backbone": self.backbone,
            "channels": list(self.channels),
            "embed_channels": self.embed_channels,
            "disc_widths": list(self.disc_widths),
        }

    def hash(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self):
        d = asdict(self)
        d["scales"], d["channels"], d["disc_widths"] = list(self.scales), list(self.channels), list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class TrainState:
    """All parameter groups, their optimisers and the iteration counter."""

    def __init__(self, config: TrainConfig):
        self.config = config
        torch.manual_seed(config.seed)
        enc = EncoderConfig(config.backbone, list(config.channels), config.pretrained_weights_path)
        self.generator = Generator(enc)
        self.contrast = ContrastiveModule(enc.channels[3], config.embed_channels)
        dcfg = DiscriminatorConfig(widths=list(config.disc_widths))
        self.disc_s = Discriminator(dcfg)
        self.disc_c = Discriminator(dcfg)
        self.t = 0
        adam = torch.optim.Adam
        self.optim = {
            "alpha_s": adam(self.generator.encoder_s.parameters(), lr=config.lr_generator),
            "alpha_c": adam(self.generator.encoder_c.parameters(), lr=config.lr_generator),
            "beta": adam(self.generator.decoder.parameters(), lr=config.lr_generator),
            "theta": adam(self.contrast.parameters(), lr=config.lr_contrastive),
            "gamma_s": adam(self.disc_s.parameters(), lr=config.lr_discriminator),
            "gamma_c": adam(self.disc_c.parameters(), lr=config.lr_discriminator),
        }

    @property
    def modules(self):
        g = self.generator
        return {
            "alpha_s": g.encoder_s,
            "alpha_c": g.encoder_c,
            "beta": g.decoder,
            "theta": self.contrast,
            "gamma_s": self.disc_s,
            "gamma_c": self.disc_c,
        }

    def parameters(self):
        for m in self.modules.values():
            yield from m.parameters()

    def zero_grad(self):
        for m in self.modules.values():
            m.zero_grad(set_to_none=True)

    def train(self, mode=True):
        for m in self.modules.values():
            m.train(mode)
        return self

    def discriminator(self, task):
        return self.disc_s if getattr(task, "value", task) == "sod" else self.disc_c

    def group_hashes(self):
        return {name: param_hash(m) for name, m in self.modules.items()}

    def state_dict(self):
        return {
            **{name: m.state_dict() for name, m in self.modules.items()},
            "optim": {name: o.state_dict() for name, o in self.optim.items()},
            "t": self.t,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
        }

    def load_state_dict(self, state):
        for name, m in self.modules.items():
            m.load_state_dict(state[name])
        for name, o in self.optim.items():
            if name in state.get("optim", {}):
                o.load_state_dict(state["optim"][name])
        self.t = int(state["t"])

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)
        return path

    @classmethod
    def load(cls, path, expected_hash=None) -> "TrainState":
        state = torch.load(path, map_location="cpu", weights_only=False)
        config = TrainConfig.from_dict(state["config"])
        if state.get("config_hash") != config.hash():
            raise DataError(f"{path}: stored config hash {state.get('config_hash')} does not match its config")
        if expected_hash is not None and expected_hash != config.hash():
            raise DataError(f"{path}: checkpoint config hash {config.hash()} != expected {expected_hash}")
        obj = cls(config)
        obj.load_state_dict(state)
        return obj

    @torch.no_grad()
    def predict(self, images: torch.Tensor, task) -> torch.Tensor:
        """Refined probability maps for an NCHW batch (eval mode)."""
        g = self.generator
        was = g.training
        g.eval()
        try:
            return g(images, task).refined_pred
        finally:
            g.train(was)

    @torch.no_grad()
    def uncertainty(self, images, preds, task) -> torch.Tensor:
        return uncertainty_map(images, preds, self.discriminator(task))

    def predictor(self, task, size=None, with_uncertainty=False):
        """A callable ImageTensor -> ndarray map at the image's own resolution."""
        net_size = size or snap32(self.config.image_size)

        def run(image: ImageTensor):
            h, w = image.shape
            x = resize_tensor(images_to_tensor([image]), (net_size, net_size))
            pred = self.predict(x, task)
            out = resize_tensor(pred, (h, w))[0, 0].clamp(0, 1).double().numpy()
            if not with_uncertainty:
                return out
            unc = resize_tensor(self.uncertainty(x, pred, task), (h, w))[0, 0].clamp(0, 1).double().numpy()
            return out, unc

        return run


def param_hash(module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def grad_norm(module) -> float:
    total = 0.0
    for p in module.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def _check_finite(terms: dict, step, phase):
    for name, v in terms.items():
        if v is not None and not torch.isfinite(v).all():
            raise TrainingDiverged(f"step {step}: non-finite {phase} loss term {name!r} ({float(v.detach())})")


def _isolated(state, before, allowed, phase):
    after = state.group_hashes()
    changed = {k for k in GROUPS if before[k] != after[k]}
    if not changed <= set(allowed):
        raise IsolationError(f"{phase} changed {sorted(changed - set(allowed))}; only {sorted(allowed)} allowed")
    return after


@contextmanager
def keep_running_stats(*modules):
    """Normalise with batch statistics without updating the running estimates."""
    norms = [m for mod in modules for m in mod.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.momentum = 0.0
    try:
        yield
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom


def contrastive_term(state: TrainState, bridge_images):
    g = state.generator
    size = bridge_images.shape[-2:]
    # bridge images are neither task's training distribution; keep them out of
    # the encoders' running statistics, which eval-mode predictions rely on
    with keep_running_stats(g.encoder_s, g.encoder_c):
        pyr_s = g.encoder_s(bridge_images)
        pyr_c = g.encoder_c(bridge_images)
    detach = state.config.detach_masks
    with torch.set_grad_enabled(not detach):
        pred_s = g.decoder(pyr_s, size).refined_pred
        pred_c = g.decoder(pyr_c, size).refined_pred
    emb_s = state.contrast(pyr_s)
    emb_c = state.contrast(pyr_c)
    return batch_contrastive_loss(pred_s, emb_s, pred_c, emb_c, detach_masks=detach)


def _generator_update(state, task, batch, bridge, ctrs_active, out):
    cfg = state.config
    preset = cfg.spec
    x, y = batch.images, batch.masks
    g = state.generator
    enc_group = "alpha_s" if task == "sod" else "alpha_c"
    state.zero_grad()
    dec = g(x, task)
    pred = dec.refined_pred
    terms = {"str": structure_loss(dec.refined_logits, y)}
    total = terms["str"]
    if preset.adversarial:
        terms["adv"] = generator_adv_loss(x, pred, y, state.discriminator(task))
        total = total + cfg.lambda_adv * terms["adv"]
    if ctrs_active:
        ctrs = contrastive_term(state, bridge.images)
        if ctrs is not None:
            terms["ctrs"] = ctrs
            total = total + cfg.lambda_ctrs * ctrs
    _check_finite(terms, state.t + 1, task)
    total.backward()
    out[f"beta_grad_{task}"] = grad_norm(g.decoder)
    state.optim[enc_group].step()
    state.optim["beta"].step()
    if ctrs_active and "ctrs" in terms:
        state.optim["theta"].step()
    for k, v in terms.items():
        out[f"{task}_{k}"] = float(v.detach())
    out[f"{task}_total"] = float(total.detach())
    return pred.detach()


def _discriminator_update(state, task, batch, pred, out):
    group = "gamma_s" if task == "sod" else "gamma_c"
    state.zero_grad()
    loss = discriminator_loss(batch.images, pred, batch.masks, state.discriminator(task))
    _check_finite({"dis": loss}, state.t + 1, task)
    loss.backward()
    state.optim[group].step()
    out[f"{task}_dis"] = float(loss.detach())


def train_step(state: TrainState, sod_batch=None, cod_batch=None, bridge_batch=None) -> dict:
    """Advance ``state`` by one full iteration; returns the logged loss terms."""
    cfg = state.config
    preset = cfg.spec
    t = state.t + 1
    ctrs_active = preset.contrastive and t % cfg.contrastive_period == 0
    if ctrs_active and bridge_batch is None:
        raise DataError(f"preset {cfg.preset} needs a bridge batch at step {t}")
    batches = {"sod": sod_batch, "cod": cod_batch}
    for task in preset.tasks:
        if batches[task] is None:
            raise DataError(f"preset {cfg.preset} needs a {task} batch")
    state.train(True)
    out = {"step": t, "ctrs_active": bool(ctrs_active)}
    check = cfg.check_isolation
    hashes = state.group_hashes() if check else None
    preds = {}
    for task in preset.tasks:
        preds[task] = _generator_update(state, task, batches[task], bridge_batch, ctrs_active, out)
        if check:
            allowed = {"alpha_s" if task == "sod" else "alpha_c", "beta"} | ({"theta"} if ctrs_active else set())
            hashes = _isolated(state, hashes, allowed, f"{task} generator update")
    if preset.adversarial:
        for task in preset.tasks:
            _discriminator_update(state, task, batches[task], preds[task], out)
            if check:
                hashes = _isolated(state, hashes, {"gamma_s" if task == "sod" else "gamma_c"}, f"{task} discriminator update")
    state.zero_grad()
    state.t = t
    return out


@dataclass
class TrainData:
    sod: list = field(default_factory=list)
    cod: list = field(default_factory=list)
    bridge: list = field(default_factory=list)


def load_train_data(config: TrainConfig, sod_root=None, cod_root=None, bridge_root=None) -> TrainData:
    preset = config.spec
    data = TrainData()
    if "sod" in preset.tasks:
        if sod_root is None:
            raise DataError(f"preset {config.preset} needs a SOD dataset")
        data.sod = load_dataset(sod_root, Task.SOD)
        if preset.augment_sod:
            manifest = read_augmentation_manifest(sod_root)
            if manifest is None:
                if config.preset == "asod":
                    raise DataError(f"preset asod needs an interaction manifest beside {sod_root}; run select-interaction")
                log.warning("no interaction manifest beside %s; training on the plain SOD set", sod_root)
            else:
                src, ids = manifest
                cod_source = load_dataset(cod_root or src, Task.COD)
                data.sod = augment_sod_records(data.sod, cod_source, ids)
    if "cod" in preset.tasks:
        if cod_root is None:
            raise DataError(f"preset {config.preset} needs a COD dataset")
        data.cod = load_dataset(cod_root, Task.COD)
    if preset.contrastive:
        if bridge_root is None:
            raise DataError(f"preset {config.preset} needs a bridge dataset")
        data.bridge = load_dataset(bridge_root, Task.BRIDGE)
    return data


def draw_batches(config: TrainConfig, data: TrainData, t: int):
    """Sample the three batches for iteration ``t``."""
    preset = config.spec
    sod = cod = bridge = None
    if "sod" in preset.tasks:
        sod = batch_multiscale(data.sod, config.batch_size, config.image_size, config.scales, rng_for(config.seed, t, 0))
    if "cod" in preset.tasks:
        modes = CROP_MODES if preset.crop else None
        cod = batch_multiscale(data.cod, config.batch_size, config.image_size, config.scales, rng_for(config.seed, t, 1), crop_modes=modes)
    if preset.contrastive and t % config.contrastive_period == 0:
        bbs = config.bridge_batch_size or config.batch_size
        bridge = batch_multiscale(data.bridge, bbs, config.image_size, config.scales, rng_for(config.seed, t, 2))
    return sod, cod, bridge


def run(config: TrainConfig, sod_root=None, cod_root=None, bridge_root=None, out_dir=None, resume=None, data=None, state=None, callback=None):
    """Train for ``config.max_steps`` iterations; returns the final TrainState.

    Writes ``log.jsonl`` and checkpoints under ``out_dir`` when given.
    """
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    if state is None:
        state = TrainState.load(resume) if resume else TrainState(config)
        if resume:
            # schedule fields may change on resume; architecture may not
            if state.config.hash() != config.hash():
                raise DataError("resume checkpoint architecture differs from the requested config")
            state.config = config
    data = data or load_train_data(config, sod_root, cod_root, bridge_root)
    out_dir = Path(out_dir) if out_dir else None
    logf = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        logf = open(out_dir / "log.jsonl", "a")
    lrs = {name: o.param_groups[0]["lr"] for name, o in state.optim.items()}
    start = time.time()
    try:
        while state.t < config.max_steps:
            batches = draw_batches(config, data, state.t + 1)
            rec = train_step(state, *batches)
            rec["lr"] = lrs
            rec["wall_time"] = time.time() - start
            if logf:
                logf.write(json.dumps(rec) + "\n")
                logf.flush()
            if callback:
                callback(state, rec)
            if out_dir and config.checkpoint_every and state.t % config.checkpoint_every == 0:
                state.save(out_dir / f"ckpt_{state.t:06d}.pt")
    finally:
        if logf:
            logf.close()
    if out_dir:
        state.save(out_dir / "last.pt")
    return state


def dataset_mae(state: TrainState, records, task, size=None) -> float:
    """Mean per-image MAE of ``state``'s predictions on ``records``."""
    size = size or snap32(state.config.image_size)
    errs = []
    for i in range(0, len(records), 16):
        chunk = records[i : i + 16]
        x = resize_tensor(images_to_tensor([r.image for r in chunk]), (size, size))
        pred = state.predict(x, task)
        for r, p in zip(chunk, pred):
            p = resize_tensor(p[None], r.mask.shape)[0, 0].double().numpy()
            errs.append(float(np.abs(p - r.mask.data).mean()))
    return float(np.mean(errs))
