"""Cascaded reconstruction models and their training loops.

Two families:

* DcRsn: n_b blocks, each followed by hard/soft spectrum blending against
  the measured data; after every blend the next block sees both the image
  and its re-computed spectrum.  The final output is the last blend, so with
  lam=inf it agrees with the measurement on the sampled set exactly.
* VsRsn: the variable-splitting form for multi-coil data; each cascade runs
  the block as a denoiser, a per-coil least-squares spectrum update, and a
  sensitivity-weighted average with trainable positive weights.

Training is plain MSE + Adam, deterministic given the spec seed.  Assisted
variants: ``golf`` trains in two stages (base model, then a guidance-feature
module, then a fresh injected model fed frozen features); ``t1`` stacks a
registered companion contrast into the fusion input, optionally with random
circular shifts for robustness; ``t1_golf`` combines both.  A refiner can be
attached afterwards and trained adversarially.

Checkpoints are RTC containers holding every parameter plus a JSON meta
entry, bundling whatever pieces inference needs (stage-1 model, guidance
module, refiner) so a checkpoint is always self-sufficient.
"""

import math
import queue
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, ParameterError, StateError, TrainAbortError
from .fidelity import (FidelityWeights, SensitivitySet, df_single_t,
                       sens_combine, vs_x_update_t, wab_t)
from .fourier import ComplexGrid, fft2_t
from .layers import Module, global_grad_norm, mse_loss
from .metrics import MetricReport, compare
from .networks import (RSN_MODES, GolfModule, PrnBlock, RsnBlock, gol,
                       gradient_penalty)
from .phantoms import RtcContainer

FAMILIES = ("dc_rsn", "vs_rsn")
ASSISTS = ("none", "golf", "t1", "t1_golf")

_PRN_KEYS = {"hidden", "w_adv", "w_dist", "critic_base", "epochs",
             "lr_critic", "lr_re", "critic_steps", "gp_coeff"}


@dataclass
class CascadeSpec:
    """Everything needed to build and train one model, JSON-serializable."""

    family: str = "dc_rsn"
    n_b: int = 3
    mode: str = "fu_with_us"
    size: int = 64
    ki_hidden: int = 16
    ii_base: int = 16
    ii_depth: int = 2
    fu_hidden: int = 32
    assists: str = "none"
    golf_feature_depth: int = 8
    golf_base: int = 16
    golf_depth: int = 3
    lam: float = math.inf
    alpha: float = 1.0
    beta: float = 1.0
    t1_shift: int = 0
    prn: dict = None
    seed: int = 0
    epochs: int = 10
    batch: int = 4
    lr: float = 1e-3

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.assists not in ASSISTS:
            raise ConfigError(f"assists must be one of {ASSISTS}, got {self.assists!r}")
        if self.mode not in RSN_MODES:
            raise ConfigError(f"mode must be one of {RSN_MODES}, got {self.mode!r}")
        if self.n_b < 1:
            raise ConfigError(f"n_b must be >= 1, got {self.n_b}")
        if self.size < 32:
            raise ConfigError("size must be >= 32 (metric windows need it)")
        if self.size % (2 ** self.ii_depth):
            raise ConfigError(f"size {self.size} not divisible by 2^{self.ii_depth}")
        if self.assists in ("golf", "t1_golf") and self.size % (2 ** self.golf_depth):
            raise ConfigError(f"size {self.size} not divisible by 2^{self.golf_depth}")
        if self.assists != "none" and self.family != "dc_rsn":
            raise ConfigError("assisted variants are defined for the dc_rsn family")
        if self.assists in ("t1", "t1_golf") and self.mode not in ("fu", "fu_with_us"):
            raise ConfigError("t1 assistance needs a fu mode")
        if not self.lam > 0:
            raise ConfigError("lam must be positive or inf")
        if self.t1_shift < 0 or self.t1_shift > self.size // 4:
            raise ConfigError(f"t1_shift must be in [0, {self.size // 4}]")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.prn is not None:
            unknown = set(self.prn) - _PRN_KEYS
            if unknown:
                raise ConfigError(f"unknown prn keys {sorted(unknown)}")
        return self

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["lam"] = "inf" if math.isinf(self.lam) else self.lam
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown spec keys {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("lam"), str):
            if d["lam"] != "inf":
                raise ConfigError(f"lam must be a number or 'inf', got {d['lam']!r}")
            d["lam"] = math.inf
        spec = cls(**d)
        spec.validate()
        return spec


def _to_channels(z):
    return np.stack([np.asarray(z).real, np.asarray(z).imag], axis=-3)


class DcRsn(Module):
    """n_b independent blocks alternated with spectrum blending."""

    def __init__(self, spec, rng=None):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(spec.seed)
        self.n_b = spec.n_b
        self.lam = spec.lam
        t1_assist = spec.assists in ("t1", "t1_golf")
        golf_inject = spec.assists in ("golf", "t1_golf")
        self._blocks = []
        for i in range(spec.n_b):
            block = RsnBlock(spec.size, spec.mode, ki_hidden=spec.ki_hidden,
                             ii_base=spec.ii_base, ii_depth=spec.ii_depth,
                             fu_hidden=spec.fu_hidden, t1_assist=t1_assist,
                             golf_inject=golf_inject,
                             golf_channels=spec.golf_feature_depth, rng=rng)
            setattr(self, f"block{i}", block)
            self._blocks.append(block)

    def forward(self, us_image, us_k, mask, t1=None, golf=None):
        """us_image: [B,2,H,W] tensor; us_k: complex array [B,H,W] of the
        measured spectrum; returns the final blended image [B,2,H,W]."""
        m = us_image if isinstance(us_image, Tensor) else Tensor(np.asarray(us_image))
        us_k = np.asarray(us_k)
        if us_k.ndim == 2:
            us_k = us_k[None]
        k_t = Tensor(_to_channels(us_k))
        for block in self._blocks:
            r = block(m, k_t, t1=t1, golf=golf)
            m = df_single_t(r, us_k, mask, self.lam)
            k_t = fft2_t(m)
        return m


class VsRsn(Module):
    """Variable-splitting cascade for coil data, with per-cascade weights."""

    def __init__(self, spec, rng=None):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(spec.seed)
        self.n_b = spec.n_b
        self.lam = spec.lam
        self._blocks, self._weights = [], []
        for i in range(spec.n_b):
            block = RsnBlock(spec.size, spec.mode, ki_hidden=spec.ki_hidden,
                             ii_base=spec.ii_base, ii_depth=spec.ii_depth,
                             fu_hidden=spec.fu_hidden, rng=rng)
            setattr(self, f"block{i}", block)
            self._blocks.append(block)
            fw = FidelityWeights(spec.lam, spec.alpha, spec.beta)
            setattr(self, f"w{i}_log_alpha", fw.log_alpha)
            setattr(self, f"w{i}_log_beta", fw.log_beta)
            self._weights.append(fw)

    def forward(self, y, sens, mask, with_parts=False):
        """y: complex [n_c,H,W] or [B,n_c,H,W]; sens: one SensitivitySet for
        the whole batch.  Returns the final combined image (and, with
        ``with_parts``, the last per-coil spectrum-update images)."""
        y = np.asarray(y)
        if y.ndim == 3:
            y = y[None]
        grids = [ComplexGrid.from_complex(y[0, i], "kspace") for i in range(y.shape[1])]
        if y.shape[0] == 1:
            m0 = sens_combine(grids, sens, mask).z[None]
        else:
            m0 = np.stack([
                sens_combine([ComplexGrid.from_complex(y[b, i], "kspace")
                              for i in range(y.shape[1])], sens, mask).z
                for b in range(y.shape[0])])
        m = Tensor(_to_channels(m0))
        x_list = None
        for block, fw in zip(self._blocks, self._weights):
            u = block(m, fft2_t(m))
            a_t, b_t = fw.alpha_t(), fw.beta_t()
            x_list = vs_x_update_t(m, sens, mask, y, self.lam, a_t)
            m = wab_t(u, x_list, sens, a_t, b_t)
        if with_parts:
            return m, x_list
        return m


# -- dataset staging -----------------------------------------------------

def _stage(dataset):
    """Convert stored float32 sample arrays to the float64 forms training
    uses; one dict per sample."""
    out = []
    for rec in dataset.samples:
        s = {"id": rec["id"]}
        usk = rec["us_kspace"].astype(np.float64)
        s["us_k"] = usk[0] + 1j * usk[1]
        s["us_image"] = rec["us_image"].astype(np.float64)
        target = rec["target"].astype(np.float64)
        if target.ndim == 2:
            s["target"] = np.stack([target, np.zeros_like(target)])
            s["target_mag"] = target
        else:
            s["target"] = target
            s["target_mag"] = np.hypot(target[0], target[1])
        if "t1" in rec:
            t1 = rec["t1"].astype(np.float64)
            s["t1"] = np.stack([t1, np.zeros_like(t1)])
        if "coil_kspace" in rec:
            ck = rec["coil_kspace"].astype(np.float64)
            s["y"] = ck[:, 0] + 1j * ck[:, 1]
            sm = rec["sens"].astype(np.float64)
            s["sens"] = SensitivitySet(
                [ComplexGrid(sm[i, 0], sm[i, 1], "image") for i in range(sm.shape[0])],
                normalized=True)
        out.append(s)
    return out


def _check_dataset(spec, dataset):
    kind = dataset.kind
    if spec.family == "vs_rsn" and kind != "multi":
        raise ConfigError(f"vs_rsn needs a multi-coil dataset, got kind {kind!r}")
    if spec.family == "dc_rsn" and kind == "multi":
        raise ConfigError("dc_rsn trains on single-coil data; use vs_rsn for multi")
    if spec.assists in ("t1", "t1_golf") and kind != "paired":
        raise ConfigError(f"t1 assistance needs a paired dataset, got kind {kind!r}")
    if dataset.size != spec.size:
        raise DimensionError(f"dataset size {dataset.size} != spec size {spec.size}")


def _batch_arrays(staged, ids, shifts=None):
    us_image = np.stack([staged[i]["us_image"] for i in ids])
    us_k = np.stack([staged[i]["us_k"] for i in ids])
    target = np.stack([staged[i]["target"] for i in ids])
    t1 = None
    if "t1" in staged[ids[0]]:
        rows = []
        for j, i in enumerate(ids):
            arr = staged[i]["t1"]
            if shifts is not None:
                dy, dx = shifts[j]
                arr = np.roll(arr, (dy, dx), axis=(-2, -1))
            rows.append(arr)
        t1 = np.stack(rows)
    return us_image, us_k, target, t1


def _normalize_mag(mag):
    scale = float(mag.max())
    if scale <= 0:
        return np.zeros_like(mag)
    return np.clip(mag / scale, 0.0, 1.0)


# -- reconstructor bundle ------------------------------------------------

class Reconstructor:
    """A trained pipeline: the cascade model plus whatever it needs at test
    time (stage-1 model for guidance features, guidance module, refiner)."""

    def __init__(self, spec, model, stage1=None, golf=None, prn=None):
        self.spec = spec
        self.model = model
        self.stage1 = stage1
        self.golf = golf
        self.prn = prn

    def _features(self, us_image, us_k, mask, t1):
        """Guidance features from the frozen stage-1 reconstruction."""
        if self.stage1 is None or self.golf is None:
            raise StateError("model wants guidance features but the "
                             "checkpoint has no stage-1 model or guidance module")
        s1 = self.stage1(Tensor(us_image), us_k, mask, t1=_maybe_tensor(t1)).data
        mags = np.hypot(s1[:, 0], s1[:, 1])
        mags = np.stack([_normalize_mag(m) for m in mags])[:, None]
        return self.golf.features(Tensor(mags)).data

    def forward(self, us_image, us_k, mask, t1=None):
        """Cascade output (before any refiner) as [B,2,H,W] tensor."""
        golf = None
        if self.spec.assists in ("golf", "t1_golf"):
            golf = Tensor(self._features(us_image, us_k, mask, t1))
        return self.model(Tensor(np.asarray(us_image)), us_k, mask,
                          t1=_maybe_tensor(t1), golf=golf)

    def reconstruct(self, sample, mask):
        """One staged sample -> complex [H,W] reconstruction (refiner
        applied when present)."""
        us_image = sample["us_image"][None]
        us_k = sample["us_k"][None]
        t1 = sample["t1"][None] if "t1" in sample and \
            self.spec.assists in ("t1", "t1_golf") else None
        if self.spec.family == "vs_rsn":
            out = self.model(sample["y"], sample["sens"], mask)
        else:
            out = self.forward(us_image, us_k, mask, t1=t1)
        if self.prn is not None:
            out = self.prn.refine(out, us_k, mask)
        arr = out.data[0]
        return arr[0] + 1j * arr[1]


def _maybe_tensor(x):
    if x is None or isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


# -- reports -------------------------------------------------------------

@dataclass
class TrainReport:
    family: str
    assists: str
    epochs_run: int
    train_loss: list
    val_loss: list
    best_epoch: int
    best_val_loss: float
    final_psnr: float
    final_ssim: float
    final_vif: float
    wall_seconds: float
    lr_used: float
    retried: bool
    checkpoint: str = None
    extra: dict = field(default_factory=dict)
    model: object = None    # Reconstructor; not serialized
    stage1: object = None   # stage-1 TrainReport when two-stage; not serialized

    def to_dict(self):
        d = {"schema": 1}
        for k in ("family", "assists", "epochs_run", "train_loss", "val_loss",
                  "best_epoch", "best_val_loss", "final_psnr", "final_ssim",
                  "final_vif", "wall_seconds", "lr_used", "retried",
                  "checkpoint", "extra"):
            d[k] = getattr(self, k)
        return d


_REPORT_KEYS = ("schema", "family", "assists", "epochs_run", "train_loss",
                "val_loss", "best_epoch", "best_val_loss", "final_psnr",
                "final_ssim", "final_vif", "wall_seconds", "lr_used",
                "retried", "checkpoint", "extra")


def validate_train_report(d):
    """Raise ConfigError unless d is a well-formed report dict."""
    if not isinstance(d, dict):
        raise ConfigError("report must be a dict")
    if d.get("schema") != 1:
        raise ConfigError(f"unsupported report schema {d.get('schema')!r}")
    missing = [k for k in _REPORT_KEYS if k not in d]
    extra = [k for k in d if k not in _REPORT_KEYS]
    if missing or extra:
        raise ConfigError(f"report keys wrong: missing={missing} extra={extra}")
    if len(d["train_loss"]) != d["epochs_run"] or len(d["val_loss"]) != d["epochs_run"]:
        raise ConfigError("loss curves must have one entry per epoch")
    for k in ("best_val_loss", "final_psnr", "final_ssim", "final_vif",
              "wall_seconds", "lr_used"):
        if not isinstance(d[k], (int, float)) or not math.isfinite(d[k]):
            raise ConfigError(f"report field {k} must be finite")
    return d


# -- checkpoints ---------------------------------------------------------

def save_checkpoint(path, rec, meta=None):
    """Write a Reconstructor to one RTC file (weights + JSON meta)."""
    box = RtcContainer()
    info = {"format": 1, "spec": rec.spec.to_dict(),
            "has_stage1": rec.stage1 is not None,
            "has_golf": rec.golf is not None,
            "has_prn": rec.prn is not None}
    if rec.golf is not None:
        info["golf"] = {"feature_depth": rec.golf.feature_depth,
                        "base": rec.spec.golf_base, "depth": rec.spec.golf_depth,
                        "eps": rec.golf.eps, "trained": rec.golf.trained}
    if rec.prn is not None:
        info["prn"] = {"channels": rec.prn.c1.w.shape[1],
                       "hidden": rec.prn.c1.w.shape[0],
                       "w_adv": rec.prn.w_adv, "w_dist": rec.prn.w_dist,
                       "critic_base": rec.prn.critic.c1.w.shape[0]}
    if meta:
        info["meta"] = meta
    box.add_json("meta", info)
    for name, p in rec.model.named_parameters():
        box.add("model/" + name, p.data)
    if rec.stage1 is not None:
        for name, p in rec.stage1.named_parameters():
            box.add("stage1/" + name, p.data)
    if rec.golf is not None:
        for name, p in rec.golf.named_parameters():
            box.add("golf/" + name, p.data)
    if rec.prn is not None:
        for name, p in rec.prn.named_parameters():
            box.add("prn/" + name, p.data)
    box.write(path)
    return str(path)


def _load_group(box, prefix, module):
    state = {name[len(prefix):]: arr for name, arr in box.entries.items()
             if name.startswith(prefix)}
    module.load_state_dict(state)
    return module


def load_checkpoint(path):
    """Rebuild the full Reconstructor saved by save_checkpoint."""
    path = Path(path)
    if not path.exists():
        raise StateError(f"checkpoint {path} does not exist")
    box = RtcContainer.read(path)
    info = box.get_json("meta")
    if info.get("format") != 1:
        raise StateError(f"unsupported checkpoint format {info.get('format')!r}")
    spec = CascadeSpec.from_dict(info["spec"])
    model = _load_group(box, "model/", build_model(spec))
    stage1 = golf = prn = None
    if info["has_stage1"]:
        stage1 = _load_group(box, "stage1/", build_model(_base_spec(spec)))
    if info["has_golf"]:
        g = info["golf"]
        golf = GolfModule(feature_depth=g["feature_depth"], base=g["base"],
                          depth=g["depth"], eps=g["eps"],
                          rng=np.random.default_rng(spec.seed))
        _load_group(box, "golf/", golf)
        golf.trained = bool(g["trained"])
    if info["has_prn"]:
        p = info["prn"]
        prn = PrnBlock(channels=p["channels"], hidden=p["hidden"],
                       w_adv=p["w_adv"], w_dist=p["w_dist"],
                       critic_base=p["critic_base"],
                       rng=np.random.default_rng(spec.seed))
        _load_group(box, "prn/", prn)
    return Reconstructor(spec, model, stage1=stage1, golf=golf, prn=prn)


def build_model(spec, rng=None):
    spec.validate()
    if spec.family == "dc_rsn":
        return DcRsn(spec, rng=rng)
    return VsRsn(spec, rng=rng)


def _base_spec(spec):
    """The stage-1 spec matching an assisted spec: guidance stripped."""
    base_assists = {"golf": "none", "t1_golf": "t1"}.get(spec.assists, spec.assists)
    return replace(spec, assists=base_assists)


# -- core training loop --------------------------------------------------

def _batched(order, batch):
    for i in range(0, len(order), batch):
        yield list(order[i:i + batch])


def _forward_batch(model, spec, staged, ids, mask, feats=None, shifts=None):
    if spec.family == "vs_rsn":
        # per-sample coil maps force batch size 1 in this family
        outs = [model(staged[i]["y"], staged[i]["sens"], mask) for i in ids]
        return outs[0] if len(outs) == 1 else ad.concat(outs, axis=0)
    us_image, us_k, _, t1 = _batch_arrays(staged, ids, shifts)
    if spec.assists not in ("t1", "t1_golf"):
        t1 = None   # paired data carries t1 even when the model ignores it
    golf = None
    if feats is not None:
        golf = Tensor(np.stack([feats[i] for i in ids]))
    return model(Tensor(us_image), us_k, mask, t1=_maybe_tensor(t1), golf=golf)


def _loss_for(model, spec, staged, ids, mask, feats=None, shifts=None):
    out = _forward_batch(model, spec, staged, ids, mask, feats, shifts)
    target = np.stack([staged[i]["target"] for i in ids])
    return mse_loss(out, target)


def _abort(stage, epoch, batch_no, model, last_loss):
    diag = {"stage": stage, "last_loss": last_loss,
            "grad_norm": float(global_grad_norm(model.parameters())),
            "param_norm": float(np.sqrt(sum(float(np.sum(p.data ** 2))
                                            for p in model.parameters())))}
    raise TrainAbortError(f"non-finite loss in {stage}", epoch, batch_no, diag)


def _val_loss(model, spec, staged, val_ids, mask, batch, feats=None):
    total = 0.0
    for ids in _batched(val_ids, batch):
        total += float(_loss_for(model, spec, staged, ids, mask, feats).data) * len(ids)
    return total / max(1, len(val_ids))


def _fit(model, spec, staged, mask, lr, train_ids, val_ids, feats=None,
         shift_rng=None):
    """One optimization run.  Returns (train_losses, val_losses, best_state,
    best_epoch, best_val, init_val)."""
    opt = ad.Adam(model.parameters(), lr=lr)
    train_losses, val_losses = [], []
    best_state, best_epoch, best_val = None, -1, math.inf
    batch = 1 if spec.family == "vs_rsn" else spec.batch
    init_val = _val_loss(model, spec, staged, val_ids, mask, batch, feats)
    for epoch in range(spec.epochs):
        order = np.random.default_rng((spec.seed, 1000 + epoch)).permutation(train_ids)
        total, count = 0.0, 0
        for batch_no, ids in enumerate(_batched(order, batch)):
            shifts = None
            if shift_rng is not None and spec.t1_shift > 0:
                shifts = shift_rng.integers(-spec.t1_shift, spec.t1_shift + 1,
                                            size=(len(ids), 2))
            opt.zero_grad()
            loss = _loss_for(model, spec, staged, ids, mask, feats, shifts)
            lval = float(loss.data)
            if not math.isfinite(lval):
                _abort("train", epoch, batch_no, model, lval)
            loss.backward()
            if not math.isfinite(float(global_grad_norm(model.parameters()))):
                _abort("train", epoch, batch_no, model, lval)
            opt.step()
            total += lval * len(ids)
            count += len(ids)
        train_losses.append(total / count)
        vloss = _val_loss(model, spec, staged, val_ids, mask, batch, feats)
        val_losses.append(vloss)
        if vloss < best_val:
            best_val, best_epoch = vloss, epoch
            best_state = model.state_dict()
    return train_losses, val_losses, best_state, best_epoch, best_val, init_val


def _train_loss_increased_early(train_losses):
    head = train_losses[:3]
    return any(b > a for a, b in zip(head, head[1:]))


def _final_metrics(rec, staged, val_ids, mask):
    report = MetricReport()
    for i in val_ids:
        mag = np.abs(rec.reconstruct(staged[i], mask))
        report.add(compare(mag, staged[i]["target_mag"], staged[i]["id"],
                           data_range=1.0))
    return report


def evaluate_model(rec, dataset, split="val"):
    """MetricReport of a Reconstructor over one dataset split."""
    staged = _stage(dataset)
    return _final_metrics(rec, staged, dataset.indices(split), dataset.mask)


def zero_filled_report(dataset, split="val"):
    """Baseline metrics of the stored zero-filled (or coil-combined) images."""
    staged = _stage(dataset)
    report = MetricReport()
    for i in dataset.indices(split):
        s = staged[i]
        mag = np.hypot(s["us_image"][0], s["us_image"][1])
        report.add(compare(mag, s["target_mag"], s["id"], data_range=1.0))
    return report


def train(spec, dataset, out_dir=None):
    """MSE training of one cascade.  Deterministic in spec.seed; halves the
    learning rate and restarts once if the train loss rises during the first
    three epochs; aborts on non-finite loss; keeps best-validation weights.
    """
    spec.validate()
    _check_dataset(spec, dataset)
    if spec.assists in ("golf", "t1_golf"):
        raise ConfigError("guidance-assisted specs train via train_two_stage_golf")
    t0 = time.perf_counter()
    staged = _stage(dataset)
    train_ids = dataset.indices("train")
    val_ids = dataset.indices("val")
    if not train_ids or not val_ids:
        raise ConfigError("dataset needs nonempty train and val splits")
    mask = dataset.mask

    lr_used, retried = spec.lr, False
    model = build_model(spec, np.random.default_rng(spec.seed))
    shift_rng = np.random.default_rng((spec.seed, 555)) if spec.t1_shift else None
    result = _fit(model, spec, staged, mask, lr_used, train_ids, val_ids,
                  shift_rng=shift_rng)
    if _train_loss_increased_early(result[0]):
        lr_used, retried = spec.lr / 2.0, True
        model = build_model(spec, np.random.default_rng(spec.seed))
        shift_rng = np.random.default_rng((spec.seed, 555)) if spec.t1_shift else None
        result = _fit(model, spec, staged, mask, lr_used, train_ids, val_ids,
                      shift_rng=shift_rng)
    train_losses, val_losses, best_state, best_epoch, best_val, init_val = result
    model.load_state_dict(best_state)
    rec = Reconstructor(spec, model)
    metrics = _final_metrics(rec, staged, val_ids, mask)
    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = save_checkpoint(out / "checkpoint.rtc", rec,
                               meta={"best_epoch": best_epoch, "best_val": best_val})
    return TrainReport(
        family=spec.family, assists=spec.assists, epochs_run=spec.epochs,
        train_loss=train_losses, val_loss=val_losses, best_epoch=best_epoch,
        best_val_loss=best_val, final_psnr=metrics.mean("psnr_db"),
        final_ssim=metrics.mean("ssim"), final_vif=metrics.mean("vif"),
        wall_seconds=time.perf_counter() - t0, lr_used=lr_used,
        retried=retried, checkpoint=ckpt,
        extra={"init_val_loss": init_val}, model=rec)


# -- two-stage guidance training ----------------------------------------

def _train_golf_module(spec, staged, train_ids, val_ids):
    """Regress gol(target) from the target magnitude; returns the trained
    module plus its loss curves."""
    module = GolfModule(feature_depth=spec.golf_feature_depth,
                        base=spec.golf_base, depth=spec.golf_depth,
                        rng=np.random.default_rng(spec.seed + 1))
    gol_maps = {i: _gol_target(staged[i]["target_mag"], module.eps)
                for i in train_ids + val_ids}
    opt = ad.Adam(module.parameters(), lr=spec.lr)
    curves = {"train": [], "val": []}
    for epoch in range(spec.epochs):
        order = np.random.default_rng((spec.seed, 2000 + epoch)).permutation(train_ids)
        total, count = 0.0, 0
        for batch_no, ids in enumerate(_batched(order, spec.batch)):
            opt.zero_grad()
            x = np.stack([staged[i]["target_mag"] for i in ids])[:, None]
            y = np.stack([gol_maps[i] for i in ids])
            loss = mse_loss(module.predict_gol(Tensor(x)), y)
            lval = float(loss.data)
            if not math.isfinite(lval):
                _abort("golf", epoch, batch_no, module, lval)
            loss.backward()
            opt.step()
            total += lval * len(ids)
            count += len(ids)
        curves["train"].append(total / count)
        xv = np.stack([staged[i]["target_mag"] for i in val_ids])[:, None]
        yv = np.stack([gol_maps[i] for i in val_ids])
        curves["val"].append(float(mse_loss(module.predict_gol(Tensor(xv)), yv).data))
    module.trained = True
    return module, curves


def _gol_target(mag, eps):
    return gol(mag, eps=eps)


def _stage1_features(stage1_rec, module, staged, ids, mask):
    """Frozen guidance features per sample, computed once from the frozen
    stage-1 reconstructions."""
    feats = {}
    for i in ids:
        mag = _normalize_mag(np.abs(stage1_rec.reconstruct(staged[i], mask)))
        feats[i] = module.features(Tensor(mag[None, None])).data[0]
    return feats


def train_two_stage_golf(spec, dataset, out_dir=None, stage1_checkpoint=None):
    """Stage 1: train the base model (or load it).  Then train the guidance
    module on (target -> gol(target)).  Stage 2: train a fresh injected
    model on frozen features from stage-1 reconstructions."""
    spec.validate()
    if spec.assists not in ("golf", "t1_golf"):
        raise ConfigError("train_two_stage_golf needs assists golf or t1_golf")
    _check_dataset(spec, dataset)
    t0 = time.perf_counter()
    staged = _stage(dataset)
    train_ids, val_ids = dataset.indices("train"), dataset.indices("val")
    mask = dataset.mask

    base = _base_spec(spec)
    stage1_report = None
    if stage1_checkpoint is not None:
        stage1_rec = load_checkpoint(stage1_checkpoint)
        if stage1_rec.spec.family != spec.family or \
                stage1_rec.spec.assists != base.assists:
            raise ConfigError("stage-1 checkpoint does not match the base spec")
    else:
        stage1_report = train(base, dataset)
        stage1_rec = stage1_report.model

    module, golf_curves = _train_golf_module(spec, staged, train_ids, val_ids)
    feats = _stage1_features(stage1_rec, module, staged, train_ids + val_ids, mask)

    model = build_model(spec, np.random.default_rng(spec.seed))
    shift_rng = np.random.default_rng((spec.seed, 555)) if spec.t1_shift else None
    lr_used, retried = spec.lr, False
    result = _fit(model, spec, staged, mask, lr_used, train_ids, val_ids,
                  feats=feats, shift_rng=shift_rng)
    if _train_loss_increased_early(result[0]):
        lr_used, retried = spec.lr / 2.0, True
        model = build_model(spec, np.random.default_rng(spec.seed))
        shift_rng = np.random.default_rng((spec.seed, 555)) if spec.t1_shift else None
        result = _fit(model, spec, staged, mask, lr_used, train_ids, val_ids,
                      feats=feats, shift_rng=shift_rng)
    train_losses, val_losses, best_state, best_epoch, best_val, init_val = result
    model.load_state_dict(best_state)
    rec = Reconstructor(spec, model, stage1=stage1_rec.model, golf=module)
    metrics = _final_metrics(rec, staged, val_ids, mask)
    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = save_checkpoint(out / "checkpoint.rtc", rec,
                               meta={"best_epoch": best_epoch, "best_val": best_val})
    report = TrainReport(
        family=spec.family, assists=spec.assists, epochs_run=spec.epochs,
        train_loss=train_losses, val_loss=val_losses, best_epoch=best_epoch,
        best_val_loss=best_val, final_psnr=metrics.mean("psnr_db"),
        final_ssim=metrics.mean("ssim"), final_vif=metrics.mean("vif"),
        wall_seconds=time.perf_counter() - t0, lr_used=lr_used, retried=retried,
        checkpoint=ckpt,
        extra={"init_val_loss": init_val,
               "golf_train_loss": golf_curves["train"],
               "golf_val_loss": golf_curves["val"],
               "stage1_best_val": None if stage1_report is None
               else stage1_report.best_val_loss},
        model=rec, stage1=stage1_report)
    return report


# -- shift-augmented t1 training ----------------------------------------

def train_t1_shift_augmented(spec, dataset, max_shift=2, out_dir=None):
    """Train with independent circular shifts of the companion contrast,
    drawn uniformly from [-max_shift, max_shift]^2 per sample per epoch."""
    if spec.assists not in ("t1", "t1_golf"):
        raise ConfigError("shift augmentation needs t1 or t1_golf assists")
    if max_shift < 0 or max_shift > spec.size // 4:
        raise ParameterError(f"max_shift must be in [0, {spec.size // 4}], "
                             f"got {max_shift}")
    shifted = replace(spec, t1_shift=max_shift)
    shifted.validate()
    if shifted.assists == "t1_golf":
        return train_two_stage_golf(shifted, dataset, out_dir=out_dir)
    return train(shifted, dataset, out_dir=out_dir)


def t1_shift_metric_sweep(rec, dataset, max_shift=2, split="val", metric="ssim"):
    """Mean metric over the split for every shift on the
    [-max_shift, max_shift]^2 grid applied to the companion contrast.
    Returns {(dy, dx): value}."""
    if max_shift < 0 or max_shift > dataset.size // 4:
        raise ParameterError(f"max_shift {max_shift} out of bounds")
    staged = _stage(dataset)
    ids = dataset.indices(split)
    mask = dataset.mask
    out = {}
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            report = MetricReport()
            for i in ids:
                s = dict(staged[i])
                s["t1"] = np.roll(s["t1"], (dy, dx), axis=(-2, -1))
                mag = np.abs(rec.reconstruct(s, mask))
                report.add(compare(mag, s["target_mag"], s["id"], data_range=1.0))
            out[(dy, dx)] = report.mean(metric)
    return out


# -- adversarial refiner training ---------------------------------------

def train_prn(block, base_rec, dataset, epochs=3, batch=4, seed=0,
              lr_critic=1e-4, lr_re=1e-3, critic_steps=5, gp_coeff=10.0,
              out_dir=None):
    """Adversarial training of a refiner on top of a frozen reconstruction
    model.  The critic (Adam) maximizes score(target) - score(refined) with
    a gradient penalty; the refiner (SGD) minimizes
    w_adv * (-score(refined)) + w_dist * mse(refined, target).
    """
    if dataset.kind not in ("single", "paired"):
        raise ConfigError("refiner training needs single-coil data")
    t0 = time.perf_counter()
    staged = _stage(dataset)
    train_ids, val_ids = dataset.indices("train"), dataset.indices("val")
    mask = dataset.mask

    recon = {i: _to_channels(base_rec.reconstruct(staged[i], mask))
             for i in train_ids + val_ids}
    re_opt = ad.Sgd(block.re_parameters(), lr=lr_re)
    critic_params = [p for n, p in block.named_parameters() if n.startswith("critic.")]
    critic_opt = ad.Adam(critic_params, lr=lr_critic, beta1=0.5, beta2=0.9)
    eps_rng = np.random.default_rng((seed, 77))

    gen_curve, critic_curve, wasserstein = [], [], []
    for epoch in range(epochs):
        g_order = np.random.default_rng((seed, 3000 + epoch)).permutation(train_ids)
        c_order = list(np.random.default_rng((seed, 4000 + epoch)).permutation(
            np.repeat(train_ids, critic_steps)))
        g_total = c_total = 0.0
        g_count = c_count = 0
        c_pos = 0
        for batch_no, ids in enumerate(_batched(g_order, batch)):
            for _ in range(critic_steps):
                c_ids = c_order[c_pos:c_pos + len(ids)] or list(ids)
                c_pos += len(c_ids)
                real = np.stack([staged[i]["target"] for i in c_ids])
                with_in = np.stack([recon[i] for i in c_ids])
                us_k = np.stack([staged[i]["us_k"] for i in c_ids])
                fake = block.refine(Tensor(with_in), us_k, mask).data
                eps = eps_rng.uniform(size=(len(c_ids), 1, 1, 1))
                inter = eps * real + (1.0 - eps) * fake
                block.zero_grad()
                s_fake = ad.mean_all(block.critic(Tensor(fake)))
                s_real = ad.mean_all(block.critic(Tensor(real)))
                gp = gradient_penalty(block.critic, inter)
                if not math.isfinite(float(gp.data)):
                    _abort("critic", epoch, batch_no, block, float(gp.data))
                c_loss = ad.add(ad.sub(s_fake, s_real),
                                ad.mul(gp, Tensor(np.asarray(gp_coeff, dtype=np.float64))))
                cval = float(c_loss.data)
                if not math.isfinite(cval):
                    _abort("critic", epoch, batch_no, block, cval)
                c_loss.backward()
                critic_opt.step()
                w_est = float(s_real.data) - float(s_fake.data)
                if not math.isfinite(w_est):
                    _abort("critic", epoch, batch_no, block, w_est)
                wasserstein.append(w_est)
                c_total += cval
                c_count += 1
            block.zero_grad()
            with_in = np.stack([recon[i] for i in ids])
            us_k = np.stack([staged[i]["us_k"] for i in ids])
            target = np.stack([staged[i]["target"] for i in ids])
            refined = block.refine(Tensor(with_in), us_k, mask)
            adv = ad.neg(ad.mean_all(block.critic(refined)))
            dist = mse_loss(refined, target)
            g_loss = ad.add(ad.mul(adv, Tensor(np.asarray(block.w_adv))),
                            ad.mul(dist, Tensor(np.asarray(block.w_dist))))
            gval = float(g_loss.data)
            if not math.isfinite(gval):
                _abort("generator", epoch, batch_no, block, gval)
            g_loss.backward()
            re_opt.step()
            g_total += gval
            g_count += 1
        gen_curve.append(g_total / max(1, g_count))
        critic_curve.append(c_total / max(1, c_count))

    refined_rec = Reconstructor(base_rec.spec, base_rec.model,
                                stage1=base_rec.stage1, golf=base_rec.golf,
                                prn=block)
    base_metrics = _final_metrics(base_rec, staged, val_ids, mask)
    refined_metrics = _final_metrics(refined_rec, staged, val_ids, mask)
    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = save_checkpoint(out / "checkpoint.rtc", refined_rec,
                               meta={"prn_epochs": epochs})
    return TrainReport(
        family=base_rec.spec.family, assists=base_rec.spec.assists,
        epochs_run=epochs, train_loss=gen_curve, val_loss=critic_curve,
        best_epoch=epochs - 1, best_val_loss=critic_curve[-1],
        final_psnr=refined_metrics.mean("psnr_db"),
        final_ssim=refined_metrics.mean("ssim"),
        final_vif=refined_metrics.mean("vif"),
        wall_seconds=time.perf_counter() - t0, lr_used=lr_re, retried=False,
        checkpoint=ckpt,
        extra={"wasserstein": wasserstein,
               "vif_base": base_metrics.mean("vif"),
               "vif_refined": refined_metrics.mean("vif")},
        model=refined_rec)


# -- prefetching ---------------------------------------------------------

class PrefetchLoader:
    """Iterate a source on a producer thread through a bounded FIFO queue.

    Order is preserved; the producer blocks when the queue holds ``capacity``
    items and the consumer blocks when it is empty.  Exceptions raised by the
    source re-raise in the consumer.
    """

    def __init__(self, source, capacity=4):
        if capacity < 1:
            raise ParameterError(f"capacity must be >= 1, got {capacity}")
        self._source = source
        self.capacity = capacity

    def __iter__(self):
        q = queue.Queue(maxsize=self.capacity)
        done = object()

        def produce():
            try:
                for item in self._source:
                    q.put(("item", item))
            except Exception as exc:  # forwarded, not swallowed
                q.put(("error", exc))
            else:
                q.put(("done", done))

        worker = threading.Thread(target=produce, daemon=True)
        worker.start()
        while True:
            kind, payload = q.get()
            if kind == "error":
                worker.join()
                raise payload
            if kind == "done":
                worker.join()
                return
            yield payload


def baseline_psnr_gain(report, dataset):
    """Convenience: trained val PSNR minus the zero-filled baseline's."""
    zf = zero_filled_report(dataset)
    return report.final_psnr - zf.mean("psnr_db")
