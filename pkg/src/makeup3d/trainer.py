"""Adversarial training loop for the UV makeup generator.

Every iteration samples one source and one reference face, updates the three
discriminators on ``L_D`` (each with its own optimizer, in a fixed order),
then updates the generator on ``L_G``. Loss components are streamed as JSON
lines.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .container import read_container, write_container
from .face3d import flip_uv
from .face3d.io import load_image, save_image
from .fr_bank import ModelBank, build_mock_bank, load_registry
from .generator import GeneratorConfig, MakeupGAN
from .losses import (
    LossWeights,
    RandomFeatureExtractor,
    RegionMasks,
    adversarial_image,
    adversarial_texture,
    attack_loss,
    makeup_loss_2d,
    makeup_loss_uv,
    perceptual_loss,
    target_embeddings,
    total_losses,
)

CHECKPOINT_KIND = "makeup-gan-checkpoint"
CHECKPOINT_VERSION = 1
D_ORDER = ("d_tex_src", "d_tex_ref", "d_img")


class TrainingError(RuntimeError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Run configuration; ``bank`` is ``{"kind": "mock", k, seed, dim[, holdout]}``
    or ``{"kind": "registry", "path": ...}``."""

    dataset: str = ""
    out_dir: str = "run"
    target_image: str | None = None
    iterations: int = 200
    learning_rate: float = 2e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    batch_size: int = 1
    seed: int = 0
    uv_resolution: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    bank: dict = field(default_factory=lambda: {"kind": "mock", "k": 2, "seed": 0, "dim": 64, "crop": 0.6})
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    checkpoint_interval: int = 0
    grad_clip: float | None = 10.0
    repair_threshold: float = 0.3
    train_sources: int | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        if isinstance(self.generator, dict):
            self.generator = GeneratorConfig.from_dict(self.generator)
        self.validate()

    def validate(self):
        if int(self.iterations) < 1:
            raise ValueError("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint_interval must be >= 0")
        if self.bank.get("kind") not in ("mock", "registry"):
            raise ValueError(f"unknown bank kind {self.bank.get('kind')!r}")

    def to_dict(self):
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        d["generator"] = self.generator.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self):
        # run length and output locations do not change what is trained, so resume may extend a run
        d = {k: v for k, v in self.to_dict().items() if k not in ("out_dir", "checkpoint_interval", "iterations")}
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path):
    path = Path(path)
    d = json.loads(path.read_text())
    # relative paths in a config file are relative to the file
    for key in ("dataset", "out_dir", "target_image"):
        if d.get(key) and not Path(d[key]).is_absolute():
            d[key] = str(path.parent / d[key])
    if d.get("bank", {}).get("kind") == "registry" and not Path(d["bank"]["path"]).is_absolute():
        d["bank"] = dict(d["bank"], path=str(path.parent / d["bank"]["path"]))
    return TrainConfig.from_dict(d)


def build_bank(spec, calibration=None):
    if spec["kind"] == "mock":
        bank = build_mock_bank(spec.get("k", 2), spec.get("seed", 0), spec.get("dim", 64),
                               calibration=calibration, input_size=spec.get("input_size", 32),
                               crop=spec.get("crop", 1.0))
        return bank.with_holdout(spec["holdout"]) if spec.get("holdout") else bank
    bank, _ = load_registry(spec["path"])
    return bank


# --- sampling ------------------------------------------------------------------

class EpochSampler:
    """Pairs sources with references without replacement, reshuffling each epoch.

    An epoch has ``min(n_src, n_ref)`` pairs.
    """

    def __init__(self, n_src, n_ref, seed):
        if n_src < 1 or n_ref < 1:
            raise ValueError("source and reference sets must be nonempty")
        self.n_src, self.n_ref = n_src, n_ref
        self.rng = np.random.default_rng(seed)
        self.queue = []
        self.epoch = 0

    def _refill(self):
        n = min(self.n_src, self.n_ref)
        s = self.rng.permutation(self.n_src)[:n]
        r = self.rng.permutation(self.n_ref)[:n]
        self.queue = [(int(a), int(b)) for a, b in zip(s, r)]
        self.epoch += 1

    def next(self):
        if not self.queue:
            self._refill()
        return self.queue.pop(0)

    def state(self):
        return {"rng": self.rng.bit_generator.state, "queue": self.queue, "epoch": self.epoch}

    def load_state(self, st):
        self.rng.bit_generator.state = st["rng"]
        self.queue = [tuple(p) for p in st["queue"]]
        self.epoch = st["epoch"]


# --- batches -------------------------------------------------------------------

@dataclass
class FaceTensors:
    name: str
    texture: torch.Tensor  # (1, 3, R, R)
    coverage: torch.Tensor  # (1, 1, R, R)
    visibility: torch.Tensor  # (1, 1, R, R)
    image: torch.Tensor  # (1, 3, H, W)
    yaw: float
    masks: RegionMasks
    uv_masks: RegionMasks
    plan: object

    @classmethod
    def from_artifacts(cls, art, dtype=torch.float32):
        return cls(
            name=art.record.name,
            texture=art.texture.tensor(dtype)[None],
            coverage=torch.as_tensor(art.texture.coverage, dtype=dtype)[None, None],
            visibility=art.visibility.tensor(dtype)[None],
            image=art.image_tensor(dtype)[None],
            yaw=float(art.yaw),
            masks=art.masks,
            uv_masks=art.uv_masks,
            plan=art.plan,
        )


def completed_uv_masks(face):
    """UV masks of a reference with hidden texels filled from the mirrored side."""
    labels = face.uv_masks.to_label_map()
    if abs(face.yaw) > 5.0:
        labels = np.where(labels > 0, labels, flip_uv(labels))
    return RegionMasks.from_label_map(labels)


# --- training state -------------------------------------------------------------

class TrainState:
    def __init__(self, config, bank, target_image, dtype=torch.float32):
        self.config = config
        self.dtype = dtype
        torch.manual_seed(config.seed)
        self.gan = MakeupGAN(config.generator).to(dtype)
        g = config.generator
        betas = (config.adam_beta1, config.adam_beta2)
        self.opt_g = torch.optim.Adam(self.gan.generator.parameters(), lr=config.learning_rate, betas=betas)
        self.opt_d = {name: torch.optim.Adam(getattr(self.gan, name).parameters(), lr=config.learning_rate,
                                             betas=betas) for name in D_ORDER}
        self.bank = bank
        self.attack_models = bank.training_models if isinstance(bank, ModelBank) else list(bank)
        self.target = torch.as_tensor(target_image, dtype=dtype)
        if self.target.dim() == 3:
            self.target = self.target[None]
        self.targets = target_embeddings(self.target, self.attack_models)
        self.features = RandomFeatureExtractor(seed=config.seed + 17).to(dtype)
        self.iteration = 0
        self.sampler = None
        self.order_hook = None
        self.generator_config = g

    @property
    def generator(self):
        return self.gan.generator

    def _notify(self, event):
        if self.order_hook is not None:
            self.order_hook(event)


def _clip(params, max_norm):
    if max_norm is not None:
        torch.nn.utils.clip_grad_norm_(params, max_norm)


def _finite(x):
    return x is None or bool(torch.isfinite(torch.as_tensor(x)).all())


def _item(x):
    return None if x is None else float(torch.as_tensor(x).detach())


def compute_generator_losses(state, src, ref, details=False):
    """All L_G components for one (source, reference) pair; gradients flow into G."""
    cfg = state.config
    w = cfg.weights
    gen = state.generator
    t_t, _ = gen(src.texture, ref.texture, ref.visibility, coverage=src.coverage)
    t_back, _ = gen(ref.texture, src.texture, src.visibility, coverage=ref.coverage)
    i_t = src.plan.apply(t_t, src.image)
    i_back = ref.plan.apply(t_back, ref.image)
    gan = state.gan
    _, g_tex = adversarial_texture(gan.d_tex_src, gan.d_tex_ref, src.texture, ref.texture, t_back, t_t, which="g")
    _, g_img = adversarial_image(gan.d_img, src.image, ref.image, (i_back, i_t), which="g")
    makeup = makeup_loss_2d(i_t, ref.image, src.masks, w, ref_masks=ref.masks)
    skipped = []
    makeup_uv = makeup_loss_uv(t_t, ref.texture, ref.visibility.squeeze().detach().cpu().numpy(), ref.yaw,
                               completed_uv_masks(ref), w, threshold=cfg.repair_threshold, strict=False,
                               skipped=skipped)
    per = perceptual_loss(t_t, src.texture, state.features)
    att = attack_loss(state.target, i_t, state.attack_models, targets=state.targets)
    comps = {"g_tex_adv": g_tex, "g_img_adv": g_img, "makeup": makeup, "makeup_uv": makeup_uv,
             "per": per, "att": att}
    if details:
        comps["_fakes"] = (t_t, t_back, i_t, i_back)
        comps["_skipped"] = skipped
    return comps


def discriminator_losses(state, src, ref, fakes):
    t_t, t_back, i_t, i_back = (f.detach() for f in fakes)
    gan = state.gan
    d_tex, _ = adversarial_texture(gan.d_tex_src, gan.d_tex_ref, src.texture, ref.texture, t_back, t_t, which="d")
    d_img, _ = adversarial_image(gan.d_img, src.image, ref.image, (i_back, i_t), which="d")
    return d_tex, d_img


def train_step(state, pairs):
    """One iteration over a list of ``(source, reference)`` :class:`FaceTensors` pairs.

    Discriminators are updated first (in ``D_ORDER``), then the generator.
    Returns the loss record.
    """
    cfg = state.config
    w = cfg.weights
    gan = state.gan
    n = len(pairs)

    # fakes for the discriminator update come from the current generator
    with torch.no_grad():
        fakes = []
        for src, ref in pairs:
            t_t, _ = gan.generator(src.texture, ref.texture, ref.visibility, coverage=src.coverage)
            t_back, _ = gan.generator(ref.texture, src.texture, src.visibility, coverage=ref.coverage)
            fakes.append((t_t, t_back, src.plan.apply(t_t, src.image), ref.plan.apply(t_back, ref.image)))

    for opt in state.opt_d.values():
        opt.zero_grad(set_to_none=True)
    d_tex = d_img = 0.0
    for (src, ref), f in zip(pairs, fakes):
        a, b = discriminator_losses(state, src, ref, f)
        d_tex = d_tex + a / n
        d_img = d_img + b / n
    _, l_d = total_losses({"d_tex_adv": d_tex, "d_img_adv": d_img}, w)
    record = {"iteration": state.iteration, "source": [p[0].name for p in pairs],
              "reference": [p[1].name for p in pairs], "d_tex_adv": _item(d_tex), "d_img_adv": _item(d_img),
              "L_D": _item(l_d)}
    if not _finite(l_d):
        record["status"] = "non-finite"
        raise TrainingError(f"non-finite discriminator loss at iteration {state.iteration}", record)
    l_d.backward()
    for name in D_ORDER:
        params = list(getattr(gan, name).parameters())
        _clip(params, cfg.grad_clip)
        state.opt_d[name].step()
        state._notify(name)

    state.opt_g.zero_grad(set_to_none=True)
    totals = {}
    skipped = []
    for src, ref in pairs:
        comps = compute_generator_losses(state, src, ref, details=True)
        skipped += comps.pop("_skipped")
        comps.pop("_fakes")
        for k, v in comps.items():
            if v is not None:
                totals[k] = totals.get(k, 0.0) + v / n
    l_g, _ = total_losses(totals, w)
    record.update({k: _item(v) for k, v in totals.items()})
    record["L_G"] = _item(l_g)
    record["skipped_regions"] = skipped
    if not _finite(l_g):
        record["status"] = "non-finite"
        raise TrainingError(f"non-finite generator loss at iteration {state.iteration}", record)
    l_g.backward()
    # discriminator grads from L_G are discarded; only G steps here
    _clip(list(gan.generator.parameters()), cfg.grad_clip)
    state.opt_g.step()
    state._notify("generator")
    for d in D_ORDER:
        for p in getattr(gan, d).parameters():
            p.grad = None
    state.iteration += 1
    record["status"] = "ok"
    return record


# --- checkpoints ----------------------------------------------------------------

def _optimizer_tensors(prefix, opt, tensors):
    sd = opt.state_dict()
    for idx, st in sd["state"].items():
        for k, v in st.items():
            tensors[f"{prefix}.{idx}.{k}"] = torch.as_tensor(v).detach().cpu().numpy()
    return sd["param_groups"]


def save_checkpoint(state, path):
    tensors = {f"gan.{k}": v.detach().cpu().numpy() for k, v in state.gan.state_dict().items()}
    groups = {"generator": _optimizer_tensors("opt.generator", state.opt_g, tensors)}
    for name, opt in state.opt_d.items():
        groups[name] = _optimizer_tensors(f"opt.{name}", opt, tensors)
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "package_version": __version__,
        "iteration": state.iteration,
        "seed": state.config.seed,
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "generator_config": state.generator_config.to_dict(),
        "param_groups": groups,
        "sampler": state.sampler.state() if state.sampler is not None else None,
        "dtype": str(state.dtype).replace("torch.", ""),
    }
    return write_container(path, tensors, kind=CHECKPOINT_KIND, metadata=meta)


def _load_optimizer(opt, prefix, tensors, groups):
    state = {}
    for key, arr in tensors.items():
        if key.startswith(prefix + "."):
            idx, name = key[len(prefix) + 1:].split(".", 1)
            state.setdefault(int(idx), {})[name] = torch.as_tensor(arr)
    opt.load_state_dict({"state": state, "param_groups": groups})


def read_checkpoint(path):
    tensors, meta = read_container(path, kind=CHECKPOINT_KIND)
    got = meta.get("checkpoint_version")
    if got != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {got} is not supported (reader is {CHECKPOINT_VERSION})")
    return tensors, meta


def load_generator(path):
    """Just the generator, for inference."""
    from .generator import UVGenerator

    tensors, meta = read_checkpoint(path)
    gen = UVGenerator(GeneratorConfig.from_dict(meta["generator_config"]))
    sd = {k[len("gan.generator."):]: torch.as_tensor(v) for k, v in tensors.items()
          if k.startswith("gan.generator.")}
    gen.load_state_dict(sd)
    gen.to(getattr(torch, meta.get("dtype", "float32")))
    gen.eval()
    return gen, meta


def load_checkpoint(path, bank, target_image, config=None):
    """Rebuild a :class:`TrainState`; warns when ``config`` hashes differently."""
    tensors, meta = read_checkpoint(path)
    stored = TrainConfig.from_dict(meta["config"])
    if config is not None and config.hash() != meta["config_hash"]:
        warnings.warn(f"config hash {config.hash()} differs from checkpoint {meta['config_hash']}",
                      stacklevel=2)
    cfg = config or stored
    dtype = getattr(torch, meta.get("dtype", "float32"))
    state = TrainState(cfg, bank, target_image, dtype=dtype)
    sd = {k[4:]: torch.as_tensor(v) for k, v in tensors.items() if k.startswith("gan.")}
    state.gan.load_state_dict(sd)
    groups = meta["param_groups"]
    _load_optimizer(state.opt_g, "opt.generator", tensors, groups["generator"])
    for name, opt in state.opt_d.items():
        _load_optimizer(opt, f"opt.{name}", tensors, groups[name])
    state.iteration = meta["iteration"]
    state._sampler_state = meta.get("sampler")
    return state


# --- full run --------------------------------------------------------------------

def _target_image(config, dataset):
    if config.target_image:
        img = load_image(config.target_image)
    else:
        targets = dataset.split("target")
        if not targets:
            raise ValueError("no target_image given and the dataset has no target split")
        img = dataset.artifacts(targets[0]).image
    return torch.as_tensor(img.transpose(2, 0, 1).copy(), dtype=torch.float32)


def calibration_images(dataset):
    """Clean source images used to center mock embedders."""
    imgs = [dataset.artifacts(r).image_tensor() for r in dataset.split("source")]
    return torch.stack(imgs)


def prepare_run(config, dataset=None):
    """Load data, bank and state for ``config`` without training."""
    from .data import load_dataset

    ds = dataset or load_dataset(config.dataset)
    sources = ds.split("source")
    if config.train_sources is not None:
        sources = sources[: config.train_sources]
    refs = ds.split("reference")
    if not sources or not refs:
        raise ValueError("training needs nonempty source and reference splits")
    if ds.uv_resolution != config.uv_resolution:
        raise ValueError(f"dataset UV resolution {ds.uv_resolution} != config {config.uv_resolution}")
    bank = build_bank(config.bank, calibration=calibration_images(ds))
    target = _target_image(config, ds)
    src_t = [FaceTensors.from_artifacts(ds.artifacts(r)) for r in sources]
    ref_t = [FaceTensors.from_artifacts(ds.artifacts(r)) for r in refs]
    return ds, bank, target, src_t, ref_t


def export_run_assets(bank, target, out):
    """Write the bank (as a registry) and target image next to a run, so later
    commands score against exactly the models and identity used in training."""
    from .fr_bank import save_mock_model, write_registry

    out = Path(out)
    (out / "bank").mkdir(parents=True, exist_ok=True)
    entries = {}
    for m in bank:
        path = save_mock_model(m, out / "bank" / f"{m.name}.m3d")
        entries[m.name] = {"adapter": "mock", "checkpoint": path.name, "embedding_dim": m.embedding_dim,
                           "input_size": m.input_size}
    write_registry(out / "bank" / "registry.json", entries, holdout=bank.holdout)
    save_image(target.permute(1, 2, 0).numpy(), out / "target.png")
    return out / "bank" / "registry.json"


def train(config, dataset=None, resume=None, log_path=None, progress=None):
    """Run ``config.iterations`` iterations; returns ``(state, final checkpoint path)``."""
    ds, bank, target, src_t, ref_t = prepare_run(config, dataset)
    out = Path(config.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    if config.bank["kind"] == "mock" and not resume:
        export_run_assets(bank, target, out)
    if resume:
        state = load_checkpoint(resume, bank, target, config)
    else:
        state = TrainState(config, bank, target)
    state.sampler = EpochSampler(len(src_t), len(ref_t), config.seed + 1)
    if getattr(state, "_sampler_state", None):
        state.sampler.load_state(state._sampler_state)
    log_path = Path(log_path) if log_path else out / "losses.jsonl"
    provenance = out / "provenance.jsonl"
    final = None
    mode = "a" if resume else "w"
    with open(log_path, mode) as log, open(provenance, mode) as prov:
        while state.iteration < config.iterations:
            pairs = [state.sampler.next() for _ in range(config.batch_size)]
            batch = [(src_t[i], ref_t[j]) for i, j in pairs]
            t0 = time.perf_counter()
            try:
                rec = train_step(state, batch)
            except TrainingError as exc:
                log.write(json.dumps(exc.record) + "\n")
                raise
            rec["seconds"] = round(time.perf_counter() - t0, 4)
            log.write(json.dumps(rec) + "\n")
            prov.write(json.dumps({"iteration": rec["iteration"], "records": rec["source"] + rec["reference"]}) + "\n")
            if progress:
                progress(rec)
            it = state.iteration
            if config.checkpoint_interval and it % config.checkpoint_interval == 0 and it < config.iterations:
                save_checkpoint(state, out / "checkpoints" / f"iter_{it:06d}.m3d")
        final = save_checkpoint(state, out / "checkpoints" / "final.m3d")
    return state, final


def read_loss_log(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def attack_trend(records, fraction=0.1):
    """Mean ``att`` over the first and last ``fraction`` of a loss log."""
    att = [r["att"] for r in records if r.get("att") is not None]
    k = max(1, int(math.ceil(len(att) * fraction)))
    return float(np.mean(att[:k])), float(np.mean(att[-k:]))


def protect(generator, src, ref):
    """Protected image ``R(S_src, G(T_src, T_ref))`` for :class:`FaceTensors` inputs."""
    with torch.no_grad():
        t_t, _ = generator(src.texture, ref.texture, ref.visibility, coverage=src.coverage)
        return src.plan.apply(t_t, src.image)[0].clamp(0, 1)
