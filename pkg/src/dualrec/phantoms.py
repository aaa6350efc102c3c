"""Synthetic data generation and the RTC tensor container.

RTC layout (all integers little-endian):

    magic  b"RTC1"
    u32    entry count
    per entry:
        u16    name length, then name bytes (utf-8, unique per container)
        u8     dtype code: 0 = float32, 1 = float64, 2 = uint8
        u8     ndim
        u32*   dims
        bytes  payload, row-major

Round-trips are bit-exact; that is what makes checkpoint and dataset
regression tests meaningful.

Phantoms are sums of softly blurred random ellipses with a faint sinusoidal
texture, min-max normalized to [0,1].  Paired T1/T2 images share ellipse
geometry but draw intensities independently; a small planted structure gets
strong T1 contrast and near-background T2 contrast, and its bounding box is
recorded so tests can score recovery locally.  Coil maps are Gaussian lobes
spread around the field of view with gentle linear phase ramps, normalized
pointwise so sum |S_i|^2 = 1.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._filters import filter2_same_reflect, gaussian_kernel1d
from .errors import ContainerError, DimensionError, ParameterError
from .fidelity import SensitivitySet, sens_combine
from .fourier import ComplexGrid, fft2c, ifft2c
from .masks import SamplingMask, make_mask

_MAGIC = b"RTC1"
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
                  np.dtype(np.uint8): 2}


class RtcContainer:
    """An ordered name -> ndarray mapping with a fixed binary encoding."""

    def __init__(self):
        self.entries = {}

    def add(self, name, array):
        if name in self.entries:
            raise ContainerError(f"duplicate entry name {name!r}")
        array = np.ascontiguousarray(array)
        if array.dtype not in _DTYPE_TO_CODE:
            raise ContainerError(f"unsupported dtype {array.dtype} for {name!r}")
        if array.ndim > 255:
            raise ContainerError("too many dims")
        self.entries[name] = array
        return self

    def add_json(self, name, obj):
        payload = np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8)
        return self.add(name, payload.copy())

    def get_json(self, name):
        return json.loads(bytes(self.entries[name]).decode())

    def write(self, path):
        blob = bytearray()
        blob += _MAGIC
        blob += struct.pack("<I", len(self.entries))
        for name, arr in self.entries.items():
            nb = name.encode()
            blob += struct.pack("<H", len(nb))
            blob += nb
            blob += struct.pack("<BB", _DTYPE_TO_CODE[arr.dtype], arr.ndim)
            for d in arr.shape:
                blob += struct.pack("<I", d)
            blob += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        Path(path).write_bytes(bytes(blob))

    @classmethod
    def read(cls, path):
        raw = Path(path).read_bytes()
        if raw[:4] != _MAGIC:
            raise ContainerError(f"bad magic in {path}")
        off = 4

        def take(n):
            nonlocal off
            if off + n > len(raw):
                raise ContainerError(f"truncated container {path}")
            chunk = raw[off:off + n]
            off += n
            return chunk

        count, = struct.unpack("<I", take(4))
        box = cls()
        for _ in range(count):
            nlen, = struct.unpack("<H", take(2))
            name = take(nlen).decode()
            code, ndim = struct.unpack("<BB", take(2))
            if code not in _CODE_TO_DTYPE:
                raise ContainerError(f"unknown dtype code {code} in {path}")
            dims = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
            dtype = _CODE_TO_DTYPE[code]
            n_items = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            payload = take(n_items * dtype.itemsize)
            arr = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
            if name in box.entries:
                raise ContainerError(f"duplicate entry {name!r} in {path}")
            box.entries[name] = arr
        if off != len(raw):
            raise ContainerError(f"trailing bytes in {path}")
        return box


# -- phantom generation --------------------------------------------------

@dataclass
class PhantomSpec:
    size: int = 64
    n_ellipses: int = 8
    intensity_range: tuple = (0.25, 1.0)
    axis_range: tuple = (0.08, 0.3)
    texture_amplitude: float = 0.03
    edge_softness: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.size < 32:
            raise ParameterError(f"phantom size must be >= 32, got {self.size}")
        if self.n_ellipses < 1:
            raise ParameterError("need at least one ellipse")


def _draw_geometry(rng, spec):
    size = spec.size
    lo, hi = spec.axis_range
    out = []
    for _ in range(spec.n_ellipses):
        cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
        ay, ax = rng.uniform(lo * size, hi * size, size=2)
        theta = rng.uniform(0.0, np.pi)
        out.append((cy, cx, ay, ax, theta))
    return out


def _soft_kernel(sigma):
    half = max(1, int(np.ceil(3.0 * sigma)))
    return gaussian_kernel1d(2 * half + 1, sigma)


def _render(geometry, intensities, spec, texture_rng):
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for (cy, cx, ay, ax, theta), amp in zip(geometry, intensities):
        yr = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
        xr = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
        img += amp * (((yr / ay) ** 2 + (xr / ax) ** 2) <= 1.0)
    img = filter2_same_reflect(img, _soft_kernel(spec.edge_softness))
    fy, fx = texture_rng.integers(2, 7, size=2)
    ph1, ph2 = texture_rng.uniform(0.0, 2.0 * np.pi, size=2)
    img += spec.texture_amplitude * np.sin(2 * np.pi * fy * yy / size + ph1) \
        * np.sin(2 * np.pi * fx * xx / size + ph2)
    img -= img.min()
    peak = img.max()
    if peak > 0:
        img /= peak
    return img


def gen_phantom(spec):
    rng = np.random.default_rng(spec.seed)
    geometry = _draw_geometry(rng, spec)
    lo, hi = spec.intensity_range
    intensities = rng.uniform(lo, hi, size=spec.n_ellipses)
    return _render(geometry, intensities, spec, rng)


def gen_t1_t2_pair(spec, planted=True):
    """Shared geometry, per-contrast intensities.  Returns (t1, t2, bbox);
    bbox frames the planted structure (strong in t1, faint in t2) or is None."""
    rng = np.random.default_rng(spec.seed)
    geometry = _draw_geometry(rng, spec)
    lo, hi = spec.intensity_range
    int_t1 = rng.uniform(lo, hi, size=spec.n_ellipses)
    int_t2 = rng.uniform(lo, hi, size=spec.n_ellipses)
    bbox = None
    if planted:
        size = spec.size
        cy, cx = rng.uniform(0.3 * size, 0.7 * size, size=2)
        ay = ax = rng.uniform(0.06 * size, 0.1 * size)
        geometry = geometry + [(cy, cx, ay, ax, 0.0)]
        int_t1 = np.append(int_t1, 0.6)
        int_t2 = np.append(int_t2, 0.06)
        pad = 3
        bbox = (max(0, int(cy - ay) - pad), min(size, int(cy + ay) + pad + 1),
                max(0, int(cx - ax) - pad), min(size, int(cx + ax) + pad + 1))
    t1 = _render(geometry, int_t1, spec, np.random.default_rng(spec.seed + 101))
    t2 = _render(geometry, int_t2, spec, np.random.default_rng(spec.seed + 202))
    return t1, t2, bbox


def gen_coil_maps(height, width, n_c, seed=0):
    """Normalized smooth coil profiles.  Adjacent-pixel steps stay below
    1.5/min(H,W) in magnitude (lobes are wide relative to the grid)."""
    if n_c < 1:
        raise ParameterError("need at least one coil")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    sigma = 0.5 * max(height, width)
    radius = 0.55 * min(height, width) / 2.0
    maps = []
    for i in range(n_c):
        ang = 2.0 * np.pi * i / n_c + rng.uniform(-0.2, 0.2)
        cy = height / 2.0 + radius * np.sin(ang)
        cx = width / 2.0 + radius * np.cos(ang)
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))
        slope_y = rng.uniform(-np.pi / 4, np.pi / 4)
        slope_x = rng.uniform(-np.pi / 4, np.pi / 4)
        phase = slope_y * (yy - height / 2.0) / height \
            + slope_x * (xx - width / 2.0) / width + rng.uniform(0, 2 * np.pi)
        maps.append(mag * np.exp(1j * phase))
    total = np.sqrt(sum(np.abs(m) ** 2 for m in maps))
    maps = [m / total for m in maps]
    return SensitivitySet([ComplexGrid.from_complex(m, "image") for m in maps],
                          normalized=True)


# -- dataset builder -----------------------------------------------------

def _to_channels_f32(z):
    return np.stack([z.real, z.imag], axis=0).astype(np.float32)


def _sample_seed(seed, index):
    return seed * 100003 + index


DATASET_KINDS = ("single", "multi", "paired")


def make_dataset(kind, n, size, accel, mask_kind, seed, out_dir,
                 n_coils=4, noise_sigma=0.0, center_fraction=None):
    """Generate n samples sharing one fixed undersampling mask; write one RTC
    file per sample plus a manifest.json.  Returns the manifest dict."""
    if kind not in DATASET_KINDS:
        raise ParameterError(f"kind must be one of {DATASET_KINDS}, got {kind!r}")
    if n < 1:
        raise ParameterError("need at least one sample")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mask = make_mask(mask_kind, size, size, accel, seed=seed,
                     center_fraction=center_fraction)
    mask_u8 = mask.bits.astype(np.uint8)
    n_train = int(0.8 * n)
    files = []
    for i in range(n):
        sseed = _sample_seed(seed, i)
        spec = PhantomSpec(size=size, seed=sseed)
        rng = np.random.default_rng(sseed + 13)
        box = RtcContainer()
        entry = {"id": f"sample_{i:04d}", "file": f"sample_{i:04d}.rtc",
                 "split": "train" if i < n_train else "val"}
        if kind == "paired":
            t1, t2, bbox = gen_t1_t2_pair(spec)
            target = t2
            entry["bbox"] = list(bbox)
            box.add("t1", t1.astype(np.float32))
        else:
            target = gen_phantom(spec)

        if kind == "multi":
            sens = gen_coil_maps(size, size, n_coils, seed=sseed + 7)
            coil_k = []
            for s_i in sens.maps:
                k = fft2c(s_i.z * target)
                if noise_sigma > 0:
                    k = k + noise_sigma * (rng.standard_normal(k.shape)
                                           + 1j * rng.standard_normal(k.shape)) / np.sqrt(2)
                coil_k.append(np.where(mask.bits, k, 0.0))
            y_grids = [ComplexGrid.from_complex(k, "kspace") for k in coil_k]
            us_img = sens_combine(y_grids, sens, mask).z
            box.add("target", _to_channels_f32(target.astype(complex)))
            box.add("coil_kspace", np.stack([_to_channels_f32(k) for k in coil_k]))
            box.add("sens", np.stack([_to_channels_f32(s.z) for s in sens.maps]))
            box.add("us_image", _to_channels_f32(us_img))
            box.add("us_kspace", _to_channels_f32(fft2c(us_img)))
        else:
            k = fft2c(target.astype(complex))
            if noise_sigma > 0:
                k = k + noise_sigma * (rng.standard_normal(k.shape)
                                       + 1j * rng.standard_normal(k.shape)) / np.sqrt(2)
            us_k = np.where(mask.bits, k, 0.0)
            box.add("target", target.astype(np.float32))
            box.add("us_kspace", _to_channels_f32(us_k))
            box.add("us_image", _to_channels_f32(ifft2c(us_k)))
        box.add("mask", mask_u8)
        box.write(out / entry["file"])
        files.append(entry)

    manifest = {"schema": 1, "kind": kind, "n": n, "size": size,
                "accel": accel, "mask_kind": mask_kind, "seed": seed,
                "n_coils": n_coils if kind == "multi" else None,
                "noise_sigma": noise_sigma, "center_fraction": center_fraction,
                "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def write_mask_file(mask, path):
    box = RtcContainer()
    box.add("mask", mask.bits.astype(np.uint8))
    box.add_json("meta", {"kind": mask.kind, "accel": mask.accel,
                          "seed": mask.seed, "height": mask.height,
                          "width": mask.width})
    box.write(path)


def read_mask_file(path):
    box = RtcContainer.read(path)
    meta = box.get_json("meta")
    return SamplingMask(box.entries["mask"].astype(bool), meta["accel"],
                        meta["kind"], meta["seed"])


# -- loading and verification -------------------------------------------

class Dataset:
    """In-memory view of a generated dataset directory."""

    def __init__(self, manifest, samples, root):
        self.manifest = manifest
        self.samples = samples
        self.root = Path(root)
        self.mask = SamplingMask(samples[0]["mask"].astype(bool),
                                 manifest["accel"], manifest["mask_kind"],
                                 manifest["seed"])

    @property
    def kind(self):
        return self.manifest["kind"]

    @property
    def size(self):
        return self.manifest["size"]

    def indices(self, split):
        return [i for i, f in enumerate(self.manifest["files"]) if f["split"] == split]

    def __len__(self):
        return len(self.samples)


def load_dataset(manifest_path):
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema") != 1:
        raise ParameterError(f"unsupported manifest schema {manifest.get('schema')!r}")
    root = manifest_path.parent
    samples = []
    for f in manifest["files"]:
        box = RtcContainer.read(root / f["file"])
        rec = dict(box.entries)
        rec["id"] = f["id"]
        if "bbox" in f:
            rec["bbox"] = tuple(f["bbox"])
        samples.append(rec)
    return Dataset(manifest, samples, root)


def _close(a, b, tol):
    # float32 storage rounds large k-space magnitudes at ~|v|*6e-8, so the
    # tolerance scales with the stored magnitude (identity scale for images)
    b = np.asarray(b, dtype=np.float64)
    scale = max(1.0, float(np.max(np.abs(b))) if b.size else 1.0)
    return np.max(np.abs(np.asarray(a, dtype=np.float64) - b)) <= tol * scale


def verify_dataset(manifest_path, tol=1e-6):
    """Re-derive every stored array from its sources; returns a list of
    issue strings (empty = consistent)."""
    ds = load_dataset(manifest_path)
    issues = []
    want_mask = make_mask(ds.manifest["mask_kind"], ds.size, ds.size,
                          ds.manifest["accel"], seed=ds.manifest["seed"],
                          center_fraction=ds.manifest.get("center_fraction"))
    for f, rec in zip(ds.manifest["files"], ds.samples):
        sid = rec["id"]
        mask_bits = rec["mask"].astype(bool)
        if not np.array_equal(mask_bits, want_mask.bits):
            issues.append(f"{sid}: stored mask differs from regenerated mask")
        us_k = rec["us_kspace"][0] + 1j * rec["us_kspace"][1]
        back = ifft2c(us_k.astype(np.complex128))
        if not _close(np.stack([back.real, back.imag]), rec["us_image"], tol):
            issues.append(f"{sid}: ifft2(us_kspace) != us_image")
        if ds.kind != "multi":
            # for multi the combined image's spectrum is smeared off the mask
            # by the coil weighting; the per-coil check below covers it instead
            if np.any(np.abs(us_k[~mask_bits]) > 0):
                issues.append(f"{sid}: us_kspace has energy off the mask")
        if ds.kind in ("single", "paired"):
            target = rec["target"].astype(np.float64)
            if target.min() < -1e-6 or target.max() > 1.0 + 1e-6:
                issues.append(f"{sid}: target leaves [0,1]")
            if ds.manifest["noise_sigma"] == 0.0:
                want_k = np.where(mask_bits, fft2c(target.astype(complex)), 0.0)
                if not _close(np.stack([want_k.real, want_k.imag]),
                              rec["us_kspace"], tol):
                    issues.append(f"{sid}: us_kspace != mask * fft2(target)")
        if ds.kind == "paired":
            if "t1" not in rec:
                issues.append(f"{sid}: paired sample missing t1")
            if "bbox" not in rec:
                issues.append(f"{sid}: paired sample missing bbox")
        if ds.kind == "multi":
            ck = rec["coil_kspace"].astype(np.float64)
            off = ck[:, 0][:, ~mask_bits] ** 2 + ck[:, 1][:, ~mask_bits] ** 2
            if off.size and np.any(off > 0):
                issues.append(f"{sid}: coil_kspace has energy off the mask")
            sens_arr = rec["sens"]
            total = np.sum(sens_arr[:, 0].astype(np.float64) ** 2
                           + sens_arr[:, 1].astype(np.float64) ** 2, axis=0)
            if np.max(np.abs(total - 1.0)) > 1e-5:
                issues.append(f"{sid}: coil maps not normalized")
            maps = [ComplexGrid(sens_arr[i, 0].astype(np.float64),
                                sens_arr[i, 1].astype(np.float64), "image")
                    for i in range(sens_arr.shape[0])]
            sens = SensitivitySet(maps)
            y = [ComplexGrid(rec["coil_kspace"][i, 0].astype(np.float64),
                             rec["coil_kspace"][i, 1].astype(np.float64), "kspace")
                 for i in range(sens_arr.shape[0])]
            combined = sens_combine(y, sens, want_mask)
            if not _close(np.stack([combined.re, combined.im]), rec["us_image"], tol):
                issues.append(f"{sid}: sens_combine(coil data) != us_image")
    return issues
