"""CycleGAN optimisation loop, checkpoints and image normalisation.

Images enter the networks in [-1, 1] (NCHW float32); guidance extraction sees
the same images rescaled to [0, 1].
"""

import csv
import hashlib
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InvalidInput, NumericalError, ShapeMismatch
from .guidance import SemanticNet, extract_multiscale_features, semantic_stack
from .losses import (LossBreakdown, discriminator_loss, feat_map_loss,
                     generator_adversarial_loss, l1, total_objective)
from .networks import (CONV_MODES, GUIDANCE_MODES, Discriminator, DiscriminatorSpec,
                       Generator, GeneratorSpec)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
MANIFEST = "manifest.json"
SIZE_MULTIPLE = 8


@dataclass
class TrainingConfig:
    learning_rate: float = 0.002
    batch_size: int = 4
    epochs: int = 20
    patch_size: int = 64
    seed: int = 0
    init: str = "xavier"
    conv_mode: str = "pixel_adaptive"
    guidance_mode: str = "multiscale"
    affinity_mode: str = "gaussian"
    lambda_cyc: float = 10.0
    lambda_seg: float = 1.0
    seg_loss_mode: str = "rmse"
    betas: tuple = (0.5, 0.999)
    generator_widths: tuple = (8, 16, 32, 64)
    discriminator_widths: tuple = (16, 32, 64, 128)
    semantic_widths: tuple = (4, 8, 16, 32)
    layers_per_block: int = 3
    kernel_size: int = 3
    sigma_init: float = 1.0
    guidance_channels: int = 8
    # save a checkpoint every N steps when fit() has an output directory (0: only at the end)
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("betas", "generator_widths", "discriminator_widths", "semantic_widths"):
            setattr(self, name, tuple(getattr(self, name)))
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.patch_size <= 0 or self.patch_size % SIZE_MULTIPLE:
            raise ConfigError(f"patch_size must be a positive multiple of {SIZE_MULTIPLE}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.init != "xavier":
            raise ConfigError(f"unsupported init {self.init!r}")
        if self.conv_mode not in CONV_MODES:
            raise ConfigError(f"unknown conv_mode {self.conv_mode!r}")
        if self.guidance_mode not in GUIDANCE_MODES:
            raise ConfigError(f"unknown guidance_mode {self.guidance_mode!r}")
        if self.lambda_cyc < 0 or self.lambda_seg < 0:
            raise ConfigError("loss weights must be non-negative")
        if len(self.semantic_widths) != len(self.generator_widths):
            raise ConfigError("semantic and generator networks need the same number of stages")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training keys: {', '.join(unknown)}")
        return cls(**d)

    def generator_spec(self):
        if self.guidance_mode == "final_map_only":
            channels = (1,) * len(self.semantic_widths)
        else:
            channels = self.semantic_widths
        return GeneratorSpec(
            widths=self.generator_widths,
            layers_per_block=self.layers_per_block,
            kernel_size=self.kernel_size,
            conv_mode=self.conv_mode,
            guidance_mode=self.guidance_mode,
            affinity_mode=self.affinity_mode,
            sigma_init=self.sigma_init,
            guidance_channels=self.guidance_channels,
            semantic_channels=channels,
        )

    def discriminator_spec(self):
        return DiscriminatorSpec(widths=self.discriminator_widths)


@dataclass
class TrainState:
    """Everything needed to continue training or to normalise images."""

    config: TrainingConfig
    g_ab: Generator
    g_ba: Generator
    d_a: Discriminator
    d_b: Discriminator
    seg: SemanticNet
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0

    def modules(self):
        return {"g_ab": self.g_ab, "g_ba": self.g_ba, "d_a": self.d_a, "d_b": self.d_b, "seg": self.seg}

    def optimizers(self):
        return {"opt_g": self.opt_g, "opt_d": self.opt_d}


def build_state(config, seg_net):
    """Fresh Xavier-initialised networks and Adam optimisers around a frozen ``seg_net``."""
    if tuple(seg_net.widths) != config.semantic_widths:
        raise ConfigError(f"semantic net widths {seg_net.widths} != config {config.semantic_widths}")
    seg_net.freeze()
    torch.manual_seed(config.seed)
    g_ab = Generator(config.generator_spec())
    g_ba = Generator(config.generator_spec())
    d_a = Discriminator(config.discriminator_spec())
    d_b = Discriminator(config.discriminator_spec())
    opt_g = torch.optim.Adam(list(g_ab.parameters()) + list(g_ba.parameters()),
                             lr=config.learning_rate, betas=config.betas)
    opt_d = torch.optim.Adam(list(d_a.parameters()) + list(d_b.parameters()),
                             lr=config.learning_rate, betas=config.betas)
    return TrainState(config, g_ab, g_ba, d_a, d_b, seg_net, opt_g, opt_d)


def to_tensor(images):
    """uint8 ``(N, H, W, 3)`` -> float32 ``(N, 3, H, W)`` in [-1, 1]."""
    arr = np.asarray(images)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeMismatch(f"expected (N, H, W, 3) images, got {arr.shape}")
    t = torch.from_numpy(np.array(arr, copy=True)).permute(0, 3, 1, 2).float()
    return t / 127.5 - 1.0


def to_uint8(batch):
    """float ``(N, 3, H, W)`` in [-1, 1] -> uint8 ``(N, H, W, 3)``."""
    arr = ((batch.detach().clamp(-1, 1) + 1) * 127.5).permute(0, 2, 3, 1).numpy()
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def _features(image_pm1, seg):
    return extract_multiscale_features((image_pm1 + 1) / 2, seg)


def _guidance(image_pm1, feats, state):
    """Generator guidance for ``image_pm1``; reuses detached loss features when they coincide."""
    mode = state.config.guidance_mode
    if mode == "multiscale" and feats is not None:
        return [f.detach() for f in feats]
    with torch.no_grad():
        return semantic_stack(image_pm1.detach(), state.seg, mode)


def _set_requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


def _finite(name, value, step):
    if not torch.isfinite(value).all():
        raise NumericalError(name, step)
    return value


def train_step(batch_a, batch_b, state):
    """One discriminator update followed by one generator update.

    Args:
        batch_a, batch_b: ``(N, 3, H, W)`` patches in [-1, 1], same shape.
        state: the :class:`TrainState`; updated in place and returned.

    Returns:
        ``(state, LossBreakdown)``.
    """
    if batch_a.shape != batch_b.shape:
        raise ShapeMismatch(f"domain batches differ: {tuple(batch_a.shape)} vs {tuple(batch_b.shape)}")
    cfg = state.config
    step = state.step + 1
    seg_grad = cfg.lambda_seg > 0
    for m in (state.g_ab, state.g_ba, state.d_a, state.d_b):
        m.train()

    with torch.no_grad():
        feats_a = _features(batch_a, state.seg)
        feats_b = _features(batch_b, state.seg)
    fake_b = state.g_ab(batch_a, _guidance(batch_a, feats_a, state))
    fake_a = state.g_ba(batch_b, _guidance(batch_b, feats_b, state))

    # discriminators see detached fakes
    _set_requires_grad(state.d_a, True)
    _set_requires_grad(state.d_b, True)
    d_loss_a = _finite("d_loss_a", discriminator_loss(state.d_a(batch_a), state.d_a(fake_a.detach())), step)
    d_loss_b = _finite("d_loss_b", discriminator_loss(state.d_b(batch_b), state.d_b(fake_b.detach())), step)
    state.opt_d.zero_grad(set_to_none=True)
    (d_loss_a + d_loss_b).backward()
    state.opt_d.step()

    _set_requires_grad(state.d_a, False)
    _set_requires_grad(state.d_b, False)
    with torch.set_grad_enabled(seg_grad):
        feats_fake_b = _features(fake_b, state.seg)
        feats_fake_a = _features(fake_a, state.seg)
    rec_a = state.g_ba(fake_b, _guidance(fake_b, feats_fake_b, state))
    rec_b = state.g_ab(fake_a, _guidance(fake_a, feats_fake_a, state))
    with torch.set_grad_enabled(seg_grad):
        feats_rec_a = _features(rec_a, state.seg)
        feats_rec_b = _features(rec_b, state.seg)
        mode = cfg.seg_loss_mode
        l_seg1 = feat_map_loss(feats_a, feats_rec_a, mode) + feat_map_loss(feats_b, feats_rec_b, mode)
        l_seg2 = feat_map_loss(feats_a, feats_fake_b, mode) + feat_map_loss(feats_b, feats_fake_a, mode)

    terms = {
        "l_cycle_l1_forward": l1(batch_a, rec_a),
        "l_cycle_l1_backward": l1(batch_b, rec_b),
        "l_seg1": l_seg1,
        "l_seg2": l_seg2,
        "l_adv_ab": generator_adversarial_loss(state.d_b(fake_b)),
        "l_adv_ba": generator_adversarial_loss(state.d_a(fake_a)),
    }
    for name, value in terms.items():
        _finite(name, value, step)
    total = (terms["l_adv_ab"] + terms["l_adv_ba"]
             + cfg.lambda_cyc * (terms["l_cycle_l1_forward"] + terms["l_cycle_l1_backward"]))
    if seg_grad:
        total = total + cfg.lambda_seg * (l_seg1 + l_seg2)
    _finite("total", total, step)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    _set_requires_grad(state.d_a, True)
    _set_requires_grad(state.d_b, True)

    state.step = step
    breakdown = LossBreakdown(
        **{k: float(v.detach()) for k, v in terms.items()},
        d_loss_a=float(d_loss_a.detach()),
        d_loss_b=float(d_loss_b.detach()),
    )
    # logged total is recomposed in float64 so the CSV is self-consistent
    breakdown.total = total_objective(breakdown, cfg.lambda_cyc, cfg.lambda_seg)
    breakdown.check_finite(step)
    return state, breakdown


# --- fit -------------------------------------------------------------------------


def _images_of(dataset):
    return getattr(dataset, "images", dataset)


def steps_per_epoch(n_a, n_b, batch_size):
    return max(n_a, n_b) // batch_size


def epoch_order(seed, epoch, domain, n):
    """Seed-determined permutation for one domain in one epoch (independent of resume point)."""
    return np.random.default_rng([seed, epoch, domain]).permutation(n)


def batch_indices(seed, epoch, i, n_a, n_b, batch_size):
    """Indices of batch ``i`` of ``epoch``; the smaller domain wraps around."""
    pos = np.arange(i * batch_size, (i + 1) * batch_size)
    return (epoch_order(seed, epoch, 0, n_a)[pos % n_a],
            epoch_order(seed, epoch, 1, n_b)[pos % n_b])


def _open_log(path, resume_step):
    """Open the loss CSV, keeping rows up to ``resume_step`` when resuming."""
    path = Path(path)
    rows = []
    if resume_step > 0 and path.exists():
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh)][1:]
        rows = [r for r in rows if r and int(r[0]) <= resume_step]
    fh = open(path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(["step"] + LossBreakdown.columns())
    writer.writerows(rows)
    return fh, writer


def fit(dataset_a, dataset_b, config, seg_net=None, out_dir=None, resume=None,
        log_path=None, max_steps=None, callback=None):
    """Train both generators and discriminators.

    Args:
        dataset_a, dataset_b: :class:`~segcn.data.PatchDataset` or uint8 arrays
            ``(N, P, P, 3)`` with ``P == config.patch_size``.
        config: :class:`TrainingConfig`.
        seg_net: frozen semantic network (required unless resuming).
        out_dir: when given, checkpoints are written to ``out_dir/checkpoint``.
        resume: a :class:`TrainState` or checkpoint path to continue from.
        log_path: loss CSV path (defaults to ``out_dir/losses.csv`` when
            ``out_dir`` is set).
        max_steps: stop after this global step (defaults to the full schedule).
        callback: called as ``callback(state, breakdown)`` after every step.

    Returns:
        the final :class:`TrainState`.
    """
    # denormals slow CPU convolutions badly; the flag is process-wide, so restore it
    torch.set_flush_denormal(True)
    try:
        return _fit(dataset_a, dataset_b, config, seg_net, out_dir, resume, log_path, max_steps, callback)
    finally:
        torch.set_flush_denormal(False)


def _fit(dataset_a, dataset_b, config, seg_net, out_dir, resume, log_path, max_steps, callback):
    imgs_a, imgs_b = _images_of(dataset_a), _images_of(dataset_b)
    if len(imgs_a) == 0 or len(imgs_b) == 0:
        raise InvalidInput("both domains need at least one patch")
    for imgs in (imgs_a, imgs_b):
        if tuple(np.shape(imgs)[1:3]) != (config.patch_size, config.patch_size):
            raise ShapeMismatch(f"patches are {np.shape(imgs)[1:3]}, config expects {config.patch_size}")
    ta, tb = to_tensor(imgs_a), to_tensor(imgs_b)
    n_a, n_b = len(ta), len(tb)
    spe = steps_per_epoch(n_a, n_b, config.batch_size)
    if spe == 0:
        raise InvalidInput(f"fewer patches than one batch of {config.batch_size}")

    if resume is not None:
        state = load_checkpoint(resume) if isinstance(resume, (str, os.PathLike)) else resume
        # the schedule length may grow; everything that shapes the trajectory must match
        if replace(state.config, epochs=config.epochs, checkpoint_every=config.checkpoint_every) != config:
            raise ConfigError("resume checkpoint was trained with a different configuration")
        state.config = config
    else:
        if seg_net is None:
            raise ConfigError("fit needs a semantic network")
        state = build_state(config, seg_net)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_path or out_dir / "losses.csv"
    total_steps = spe * config.epochs if max_steps is None else min(max_steps, spe * config.epochs)

    fh, writer = _open_log(log_path, state.step) if log_path is not None else (None, None)
    try:
        while state.step < total_steps:
            epoch, i = divmod(state.step, spe)
            ia, ib = batch_indices(config.seed, epoch, i, n_a, n_b, config.batch_size)
            state, breakdown = train_step(ta[torch.from_numpy(ia)], tb[torch.from_numpy(ib)], state)
            if writer is not None:
                row = breakdown.as_row(state.step)
                writer.writerow([row["step"]] + [repr(row[c]) for c in LossBreakdown.columns()])
            if callback is not None:
                callback(state, breakdown)
            if state.step % spe == 0:
                log.info("epoch %d/%d step %d total %.4f", state.step // spe, config.epochs,
                         state.step, breakdown.total)
            if out_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                fh.flush()
                save_checkpoint(state, out_dir / "checkpoint")
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_checkpoint(state, out_dir / "checkpoint")
    return state


def read_loss_log(path):
    """Loss CSV as a dict of float arrays keyed by column."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in (rows[0] if rows else [])}


# --- checkpoints -------------------------------------------------------------------


def _sha256(data):
    return hashlib.sha256(data).hexdigest()


def _array_entries(state):
    for mname, module in state.modules().items():
        for pname, t in module.state_dict().items():
            yield f"{mname}/{pname}", t
    for oname, opt in state.optimizers().items():
        for idx, slots in opt.state_dict()["state"].items():
            for key, t in slots.items():
                yield f"{oname}/state/{idx}/{key}", torch.as_tensor(t)


def save_checkpoint(state, path):
    """Write ``path/manifest.json`` plus one little-endian float32 ``.bin`` per array.

    The directory is assembled under a temporary name and renamed into place.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        arrays = []
        content = hashlib.sha256()
        for i, (name, t) in enumerate(_array_entries(state)):
            arr = t.detach().cpu().numpy()
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            if not np.array_equal(np.frombuffer(data, "<f4"), arr.astype(np.float32).ravel()):
                raise InvalidInput(f"{name} does not survive float32 storage")
            fname = f"{i:05d}.bin"
            (tmp / fname).write_bytes(data)
            digest = _sha256(data)
            content.update(name.encode() + digest.encode())
            arrays.append({"name": name, "file": fname, "shape": list(arr.shape),
                           "dtype": str(arr.dtype), "sha256": digest})
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "step": state.step,
            "config": asdict(state.config),
            "optimizers": {k: opt.state_dict()["param_groups"] for k, opt in state.optimizers().items()},
            "arrays": arrays,
            "content_sha256": content.hexdigest(),
        }
        with open(tmp / MANIFEST, "w") as fh:
            json.dump(manifest, fh, indent=1)
            fh.flush()
            os.fsync(fh.fileno())
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            shutil.rmtree(old, ignore_errors=True)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, path)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return path


def read_manifest(path):
    with open(Path(path) / MANIFEST) as fh:
        return json.load(fh)


def load_checkpoint(path):
    """Rebuild a :class:`TrainState` from :func:`save_checkpoint` output, verifying hashes."""
    path = Path(path)
    if not (path / MANIFEST).exists():
        raise InvalidInput(f"{path} is not a checkpoint directory")
    manifest = read_manifest(path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInput(f"unsupported checkpoint format {manifest.get('format')}")
    content = hashlib.sha256()
    tensors = {}
    for entry in manifest["arrays"]:
        data = (path / entry["file"]).read_bytes()
        digest = _sha256(data)
        if digest != entry["sha256"]:
            raise InvalidInput(f"hash mismatch for {entry['name']}")
        content.update(entry["name"].encode() + digest.encode())
        arr = np.frombuffer(data, "<f4").reshape(entry["shape"]).astype(entry["dtype"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    if content.hexdigest() != manifest["content_sha256"]:
        raise InvalidInput("checkpoint content hash mismatch")

    config = TrainingConfig.from_dict(manifest["config"])
    seg = SemanticNet(config.semantic_widths, config.layers_per_block)
    state = build_state(config, seg)
    for mname, module in state.modules().items():
        prefix = f"{mname}/"
        module.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    state.seg.freeze()
    for oname, opt in state.optimizers().items():
        prefix = f"{oname}/state/"
        slots = {}
        for k, v in tensors.items():
            if k.startswith(prefix):
                idx, key = k[len(prefix):].split("/")
                slots.setdefault(int(idx), {})[key] = v
        opt.load_state_dict({"state": slots, "param_groups": manifest["optimizers"][oname]})
    state.step = manifest["step"]
    return state


# --- inference --------------------------------------------------------------------


def _pad_to_multiple(x, multiple):
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    log.warning("image %dx%d is not divisible by %d; reflect-padding", h, w, multiple)
    return F.pad(x, (0, pw, 0, ph), mode="reflect"), (h, w)


def normalize_image(image, state, direction="AB"):
    """Translate one uint8 RGB image ``(H, W, 3)`` with ``G_AB`` or ``G_BA``.

    Sizes that are not multiples of ``2**(stages - 1)`` are reflect-padded and
    cropped back.
    """
    if direction in ("AB", "A->B", "A→B"):
        gen = state.g_ab
    elif direction in ("BA", "B->A", "B→A"):
        gen = state.g_ba
    else:
        raise ConfigError(f"unknown direction {direction!r}")
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeMismatch(f"expected an (H, W, 3) RGB image, got {image.shape}")
    multiple = 2 ** (gen.spec.n_stages - 1)
    x, (h, w) = _pad_to_multiple(to_tensor(image[None]), multiple)
    gen.eval()
    with torch.no_grad():
        y = gen(x, semantic_stack(x, state.seg, state.config.guidance_mode))
    return to_uint8(y[..., :h, :w])[0]


def normalize_images(images, state, direction="AB"):
    return np.stack([normalize_image(img, state, direction) for img in images])


def predict_structure(images, seg, threshold=0.5):
    """Binary structure masks ``(N, H, W)`` for uint8 RGB images via the semantic network."""
    x = (to_tensor(images) + 1) / 2
    with torch.no_grad():
        return (torch.sigmoid(seg(x)) > threshold)[:, 0].numpy()


def mean_over(values, start, stop):
    """Mean of ``values`` over the 1-based inclusive step range ``[start, stop]``."""
    v = np.asarray(values, dtype=np.float64)
    return float(v[start - 1:stop].mean())


def final_fraction_mean(values, fraction=0.1):
    v = np.asarray(values, dtype=np.float64)
    k = max(1, int(math.ceil(fraction * len(v))))
    return float(v[-k:].mean())
