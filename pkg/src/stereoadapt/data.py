"""Dataset readers, paired/unpaired samplers, preprocessing, and the
procedural toy stereo generator.

Synthetic-domain samples carry ground-truth disparity; real-domain samples
never do (even when gt files are listed in the manifest for evaluation),
which enforces the unsupervised protocol at the loader level.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractViolationError, DataFormatError
from .geometry import DisparityMap, rescale_disparity

MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# disparity file formats


def read_pfm_disparity(path) -> DisparityMap:
    """Parse a grayscale portable-float-map file into a disparity map.

    Header: type token, "W H", then a scale whose sign encodes byte order.
    Rows are stored bottom-up and flipped to top-down here.  Negative or
    non-finite values are marked invalid.
    """
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic == b"PF":
            raise DataFormatError(f"{path}: color PFM not supported for disparity (offset 0)")
        if magic != b"Pf":
            raise DataFormatError(f"{path}: bad magic {magic!r} (offset 0)")
        dims_offset = f.tell()
        dims = f.readline().split()
        if len(dims) != 2:
            raise DataFormatError(f"{path}: malformed dimensions line (offset {dims_offset})")
        try:
            width, height = int(dims[0]), int(dims[1])
        except ValueError:
            raise DataFormatError(f"{path}: non-integer dimensions (offset {dims_offset})")
        if width < 1 or height < 1:
            raise DataFormatError(f"{path}: non-positive dimensions (offset {dims_offset})")
        scale_offset = f.tell()
        try:
            scale = float(f.readline().strip())
        except ValueError:
            raise DataFormatError(f"{path}: malformed scale line (offset {scale_offset})")
        endian = "<" if scale < 0 else ">"
        payload_offset = f.tell()
        payload = f.read(4 * width * height)
        if len(payload) != 4 * width * height:
            raise DataFormatError(
                f"{path}: truncated payload, got {len(payload)} of {4 * width * height} bytes "
                f"(offset {payload_offset + len(payload)})"
            )
    values = np.frombuffer(payload, dtype=endian + "f4").reshape(height, width)
    values = np.flipud(values).astype(np.float32).copy()
    valid = np.isfinite(values) & (values >= 0)
    return DisparityMap(torch.from_numpy(values), 1, torch.from_numpy(valid))


def write_pfm_disparity(data, path) -> None:
    """Write a [H, W] array as a little-endian grayscale PFM (invalid -> inf)."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise ContractViolationError(f"expected 2-D disparity, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(arr).astype("<f4").tobytes())


def read_kitti_disparity(path) -> DisparityMap:
    """Decode a 16-bit single-channel disparity image: value/256, 0 = invalid."""
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise DataFormatError(f"{path}: unreadable image")
    if arr.dtype != np.uint16 or arr.ndim != 2:
        raise DataFormatError(f"{path}: expected single-channel 16-bit, got {arr.dtype} ndim={arr.ndim}")
    values = arr.astype(np.float32) / 256.0
    valid = arr > 0
    return DisparityMap(torch.from_numpy(values), 1, torch.from_numpy(valid))


def write_kitti_disparity(disparity: DisparityMap, path) -> None:
    stored = np.round(disparity.data.numpy() * 256.0).astype(np.uint16)
    stored[~disparity.valid.numpy()] = 0
    if not cv2.imwrite(str(path), stored):
        raise IOError(f"failed to write {path}")


def read_image(path) -> torch.Tensor:
    """Load an 8-bit RGB image as a [3, H, W] float tensor in [-1, 1]."""
    arr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if arr is None:
        raise DataFormatError(f"{path}: unreadable image")
    rgb = cv2.cvtColor(arr, cv2.COLOR_BGR2RGB).astype(np.float32)
    return torch.from_numpy(rgb / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def write_image(image: torch.Tensor, path) -> None:
    """Write a [3, H, W] tensor in [-1, 1] as an 8-bit PNG."""
    arr = ((image.clamp(-1, 1) + 1.0) * 127.5).round().byte().permute(1, 2, 0).numpy()
    if not cv2.imwrite(str(path), cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)):
        raise IOError(f"failed to write {path}")


# ---------------------------------------------------------------------------
# samples, manifests, datasets


@dataclass
class StereoSample:
    left: torch.Tensor
    right: torch.Tensor
    disparity: DisparityMap = None
    noc_mask: torch.Tensor = None
    source_id: str = ""

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ContractViolationError("left/right shapes differ")


@dataclass
class PreprocessRules:
    half_resize: bool = False
    crop: tuple = None  # (height, width) or None


@dataclass
class DatasetManifest:
    domain: str
    entries: list
    preprocess: PreprocessRules = field(default_factory=PreprocessRules)
    root: Path = Path(".")

    def __post_init__(self):
        if self.domain not in ("synthetic", "real"):
            raise DataFormatError(f"unknown domain tag {self.domain!r}")

    @property
    def count(self):
        return len(self.entries)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    doc = {
        "version": MANIFEST_VERSION,
        "domain": manifest.domain,
        "preprocess": {
            "half_resize": manifest.preprocess.half_resize,
            "crop": list(manifest.preprocess.crop) if manifest.preprocess.crop else None,
        },
        "count": manifest.count,
        "entries": manifest.entries,
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid manifest JSON: {exc}") from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise DataFormatError(f"{path}: unsupported manifest version {doc.get('version')}")
    entries = doc["entries"]
    if doc["count"] != len(entries):
        raise DataFormatError(f"{path}: count {doc['count']} != {len(entries)} listed entries")
    root = path.parent
    for e in entries:
        for key in ("left", "right", "disparity", "noc_mask"):
            rel = e.get(key)
            if rel is not None and not (root / rel).exists():
                raise DataFormatError(f"{path}: missing file {rel}")
    pp = doc.get("preprocess", {})
    rules = PreprocessRules(
        half_resize=bool(pp.get("half_resize", False)),
        crop=tuple(pp["crop"]) if pp.get("crop") else None,
    )
    return DatasetManifest(doc["domain"], entries, rules, root)


def _read_disparity_any(path) -> DisparityMap:
    if str(path).endswith(".pfm"):
        return read_pfm_disparity(path)
    return read_kitti_disparity(path)


class StereoDataset:
    """Manifest-backed sample loader applying the manifest's preprocessing."""

    def __init__(self, manifest: DatasetManifest, rng=None, with_gt_override: bool = False):
        # with_gt_override lets the evaluator read listed gt for real-domain
        # data; the training path never sets it
        self.manifest = manifest
        self.rng = rng
        self.with_gt = manifest.domain == "synthetic" or with_gt_override

    def __len__(self):
        return self.manifest.count

    def load(self, index: int) -> StereoSample:
        e = self.manifest.entries[index]
        root = self.manifest.root
        disparity = noc = None
        if self.with_gt and e.get("disparity"):
            disparity = _read_disparity_any(root / e["disparity"])
        if self.with_gt and e.get("noc_mask"):
            arr = cv2.imread(str(root / e["noc_mask"]), cv2.IMREAD_GRAYSCALE)
            if arr is None:
                raise DataFormatError(f"unreadable mask {e['noc_mask']}")
            noc = torch.from_numpy(arr > 127)
        sample = StereoSample(
            left=read_image(root / e["left"]),
            right=read_image(root / e["right"]),
            disparity=disparity,
            noc_mask=noc,
            source_id=e.get("id", str(index)),
        )
        return preprocess(sample, self.manifest.preprocess, self.rng)


def _min_pool_mask(mask: torch.Tensor, k: int) -> torch.Tensor:
    inv = (~mask).float().unsqueeze(0).unsqueeze(0)
    return F.max_pool2d(inv, k).squeeze(0).squeeze(0) == 0


def preprocess(sample: StereoSample, rules: PreprocessRules, rng=None) -> StereoSample:
    """Half-resize (disparity values divided by 2) and/or a random crop
    applied to the same window of every field."""
    left, right = sample.left, sample.right
    disparity, noc = sample.disparity, sample.noc_mask
    if rules.half_resize:
        left = F.interpolate(left.unsqueeze(0), scale_factor=0.5, mode="area").squeeze(0)
        right = F.interpolate(right.unsqueeze(0), scale_factor=0.5, mode="area").squeeze(0)
        if disparity is not None:
            half = rescale_disparity(disparity, 2)
            disparity = DisparityMap(half.data, 1, half.valid)
        if noc is not None:
            noc = _min_pool_mask(noc, 2)
    if rules.crop is not None:
        ch, cw = rules.crop
        _, h, w = left.shape
        if ch > h or cw > w:
            raise ContractViolationError(f"crop {ch}x{cw} larger than image {h}x{w}")
        if rng is None:
            y0, x0 = 0, 0
        else:
            y0 = int(rng.integers(0, h - ch + 1))
            x0 = int(rng.integers(0, w - cw + 1))
        left, right, disparity, noc = crop_fields(left, right, disparity, noc, y0, x0, ch, cw)
    return StereoSample(left, right, disparity, noc, sample.source_id)


def crop_fields(left, right, disparity, noc, y0, x0, h, w):
    """Slice the same window out of every per-pixel field."""
    sl = (slice(y0, y0 + h), slice(x0, x0 + w))
    left = left[:, sl[0], sl[1]]
    right = right[:, sl[0], sl[1]]
    if disparity is not None:
        disparity = DisparityMap(disparity.data[sl], disparity.scale, disparity.valid[sl])
    if noc is not None:
        noc = noc[sl]
    return left, right, disparity, noc


class PairedSampler:
    """Uniform draws of full left-right(-disparity) samples."""

    def __init__(self, dataset: StereoDataset, rng):
        if len(dataset) == 0:
            raise ContractViolationError("cannot sample from an empty dataset")
        self.dataset = dataset
        self.rng = rng

    def draw(self) -> StereoSample:
        return self.dataset.load(int(self.rng.integers(0, len(self.dataset))))


class UnpairedSampler:
    """Uniform draws of single images from the flattened left+right pool
    (2N candidates for N pairs)."""

    def __init__(self, dataset: StereoDataset, rng):
        if len(dataset) == 0:
            raise ContractViolationError("cannot sample from an empty dataset")
        self.dataset = dataset
        self.rng = rng

    @property
    def pool_size(self):
        return 2 * len(self.dataset)

    def draw(self):
        k = int(self.rng.integers(0, self.pool_size))
        index, side = divmod(k, 2)
        sample = self.dataset.load(index)
        image = sample.left if side == 0 else sample.right
        return image, sample.source_id, "left" if side == 0 else "right"


# ---------------------------------------------------------------------------
# procedural toy data


@dataclass(frozen=True)
class PhotometricShift:
    """Per-channel gamma and gain, contrast compression around mid-gray,
    a brightness offset, and additive Gaussian noise; applied to
    target-domain images to simulate a synthetic-to-real gap."""

    gamma: tuple = (1.0, 1.0, 1.0)
    gain: tuple = (1.0, 1.0, 1.0)
    contrast: float = 1.0
    offset: float = 0.0
    noise_std: float = 0.0
    # per-view exposure/response jitter: each image of a pair draws its own
    # channel gains and offset, breaking exact left-right consistency the
    # way separate physical cameras do
    view_jitter: float = 0.0
    # amplitude of a smooth per-view multiplicative field (lens shading /
    # uneven illumination); low-frequency, so it corrupts matching at every
    # pyramid scale instead of averaging away
    shading: float = 0.0
    # per-view noise constant over 4x4 cells (sensor pattern / compression
    # artifacts); unlike white noise it does not pool away at coarse scales
    block_noise_std: float = 0.0

    @property
    def is_identity(self):
        return self == PhotometricShift()


IDENTITY_SHIFT = PhotometricShift()
DEFAULT_SHIFT = PhotometricShift(
    gamma=(2.3, 1.6, 0.55),
    gain=(0.5, 0.75, 1.1),
    contrast=0.55,
    offset=0.05,
    noise_std=0.04,
    view_jitter=0.1,
    shading=0.25,
    block_noise_std=0.12,
)

SHIFT_PROFILES = {"identity": IDENTITY_SHIFT, "default": DEFAULT_SHIFT}


def _blocky_noise(rng, height, width, cell):
    coarse = rng.uniform(-1.0, 1.0, size=(height // cell + 1, width // cell + 1))
    return np.repeat(np.repeat(coarse, cell, axis=0), cell, axis=1)[:height, :width]


def _layer_texture(rng, height, width_ext):
    """Gradient, band pattern, and two-scale aperiodic speckle over an
    extended x-domain, [0,1]^3.  The coarse speckle survives pyramid
    pooling and the fine speckle disambiguates sub-block matches, so
    horizontal correspondence is locally unique at every scale."""
    ys = np.linspace(0.0, 1.0, height)[:, None]
    xs = np.arange(width_ext)[None, :] / max(width_ext - 1, 1)
    img = np.empty((3, height, width_ext), dtype=np.float64)
    for c in range(3):
        base = rng.uniform(0.3, 0.7)
        gx, gy = rng.uniform(-0.25, 0.25, size=2)
        freq = rng.uniform(4.0, 14.0)
        phase = rng.uniform(0, 2 * np.pi)
        angle = rng.uniform(0, np.pi)
        wave = 0.1 * np.sin(2 * np.pi * freq * (np.cos(angle) * xs + np.sin(angle) * ys) + phase)
        coarse = _blocky_noise(rng, height, width_ext, 4)
        fine = rng.uniform(-1.0, 1.0, size=(height, width_ext))
        img[c] = base + gx * xs + gy * ys + wave + 0.18 * coarse + 0.12 * fine
    return np.clip(img, 0.0, 1.0)


def _render_scene(rng, height, width, max_disparity):
    """Layered rectangles at integer disparities; the right view is the exact
    horizontal re-projection of the left view.

    Returns uint8 left/right images, the dense integer disparity map, and
    the non-occlusion mask (pixels whose right-view correspondence exists
    and is unoccluded).
    """
    width_ext = width + max_disparity + 1
    num_rects = int(rng.integers(4, 9))
    layers = [
        {"disp": int(rng.integers(0, 3)), "tex": _layer_texture(rng, height, width_ext), "box": None}
    ]
    for _ in range(num_rects):
        h = int(rng.integers(height // 6, height // 2))
        w = int(rng.integers(width // 8, width // 3))
        y0 = int(rng.integers(0, height - h))
        x0 = int(rng.integers(0, width - w))
        layers.append(
            {
                "disp": int(rng.integers(1, max_disparity + 1)),
                "tex": _layer_texture(rng, height, width_ext),
                "box": (y0, y0 + h, x0, x0 + w),
            }
        )

    ys = np.arange(height)[:, None]
    xs = np.arange(width)[None, :]

    def covers(layer, x_coords):
        if layer["box"] is None:
            return np.ones((height, width), dtype=bool)
        y0, y1, x0, x1 = layer["box"]
        return (ys >= y0) & (ys < y1) & (x_coords >= x0) & (x_coords < x1)

    def top_layer_index(x_coords):
        # larger disparity = nearer = wins; the background always covers
        best = np.zeros((height, width), dtype=np.int64)
        best_d = np.full((height, width), layers[0]["disp"])
        for i, layer in enumerate(layers[1:], start=1):
            mask = covers(layer, x_coords) & (layer["disp"] > best_d)
            best[mask] = i
            best_d[mask] = layer["disp"]
        return best, best_d

    left_idx, disparity = top_layer_index(xs)
    # right view: candidate layer k covers right pixel x if (x + d_k) is in
    # its left-coordinate box; evaluate per layer
    best_right = np.zeros((height, width), dtype=np.int64)
    best_right_d = np.full((height, width), layers[0]["disp"])
    for i, layer in enumerate(layers[1:], start=1):
        mask = covers(layer, xs + layer["disp"]) & (layer["disp"] > best_right_d)
        best_right[mask] = i
        best_right_d[mask] = layer["disp"]
    right_idx = best_right

    left = np.zeros((3, height, width), dtype=np.float64)
    right = np.zeros((3, height, width), dtype=np.float64)
    for i, layer in enumerate(layers):
        lm = left_idx == i
        if lm.any():
            left[:, lm] = layer["tex"][:, :, :width][:, lm]
        rm = right_idx == i
        if rm.any():
            # sample the texture at the layer's left-view coordinate
            yy, xx = np.nonzero(rm)
            right[:, yy, xx] = layer["tex"][:, yy, xx + layer["disp"]]

    # a left pixel is non-occluded when its right correspondence exists and
    # the same layer is on top there
    xr = xs - disparity
    in_bounds = xr >= 0
    xr_c = np.clip(xr, 0, width - 1)
    noc = in_bounds & (right_idx[ys, xr_c] == left_idx)

    left8 = np.round(left * 255.0).astype(np.uint8)
    right8 = np.round(right * 255.0).astype(np.uint8)
    return left8, right8, disparity.astype(np.float32), noc


def apply_shift(image01: np.ndarray, shift: PhotometricShift, rng) -> np.ndarray:
    """One call = one view; per-view jitter and noise are drawn from rng, so
    the two images of a pair come out photometrically inconsistent."""
    out = np.empty_like(image01)
    for c in range(3):
        out[c] = np.power(image01[c], shift.gamma[c]) * shift.gain[c]
    if shift.view_jitter > 0:
        gains = 1.0 + rng.normal(0.0, shift.view_jitter, size=3)
        out = out * gains[:, None, None] + rng.normal(0.0, 0.5 * shift.view_jitter)
    if shift.shading > 0:
        _, h, w = out.shape
        knots = rng.uniform(-shift.shading, shift.shading, size=(3, 4))
        field = cv2.resize(knots, (w, h), interpolation=cv2.INTER_CUBIC)
        out = out * (1.0 + field[None, :, :])
    out = (out - 0.5) * shift.contrast + 0.5 + shift.offset
    if shift.block_noise_std > 0:
        _, h, w = out.shape
        cells = rng.normal(0.0, shift.block_noise_std, size=(3, h // 4 + 1, w // 4 + 1))
        out = out + np.repeat(np.repeat(cells, 4, axis=1), 4, axis=2)[:, :h, :w]
    if shift.noise_std > 0:
        out = out + rng.normal(0.0, shift.noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_toy_dataset(seed, num_pairs, size, max_disparity, shift_profile, out_dir):
    """Render num_pairs layered-rectangle scenes into out_dir/source and a
    photometrically shifted copy into out_dir/target.

    Ground truth and non-occlusion masks are written for both domains (the
    target manifest is tagged domain=real, so training loads it without gt;
    evaluation may opt in).  Deterministic from seed.
    """
    height, width = size
    if num_pairs < 1:
        raise ContractViolationError(f"num_pairs must be positive, got {num_pairs}")
    if height < 16 or width < 16:
        raise ContractViolationError(f"size too small: {height}x{width}")
    if not max_disparity or max_disparity >= width / 4:
        raise ContractViolationError(
            f"max_disparity {max_disparity} must be in [1, width/4 = {width / 4})"
        )
    if isinstance(shift_profile, str):
        shift_profile = SHIFT_PROFILES[shift_profile]
    out_dir = Path(out_dir)
    src_dir = out_dir / "source"
    tgt_dir = out_dir / "target"
    src_dir.mkdir(parents=True, exist_ok=True)
    tgt_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    src_entries, tgt_entries = [], []
    for i in range(num_pairs):
        left8, right8, disparity, noc = _render_scene(rng, height, width, max_disparity)
        shift_rng = np.random.default_rng(rng.integers(0, 2**63 - 1))
        for domain, ddir, entries in (("source", src_dir, src_entries), ("target", tgt_dir, tgt_entries)):
            if domain == "source":
                l8, r8 = left8, right8
            else:
                l8 = np.round(apply_shift(left8 / 255.0, shift_profile, shift_rng) * 255.0).astype(np.uint8)
                r8 = np.round(apply_shift(right8 / 255.0, shift_profile, shift_rng) * 255.0).astype(np.uint8)
            stem = f"{i:04d}"
            cv2.imwrite(str(ddir / f"left_{stem}.png"), cv2.cvtColor(l8.transpose(1, 2, 0), cv2.COLOR_RGB2BGR))
            cv2.imwrite(str(ddir / f"right_{stem}.png"), cv2.cvtColor(r8.transpose(1, 2, 0), cv2.COLOR_RGB2BGR))
            write_pfm_disparity(disparity, ddir / f"disp_{stem}.pfm")
            cv2.imwrite(str(ddir / f"noc_{stem}.png"), (noc * np.uint8(255)))
            entries.append(
                {
                    "id": f"scene_{stem}",
                    "left": f"{ddir.name}/left_{stem}.png",
                    "right": f"{ddir.name}/right_{stem}.png",
                    "disparity": f"{ddir.name}/disp_{stem}.pfm",
                    "noc_mask": f"{ddir.name}/noc_{stem}.png",
                }
            )

    source = DatasetManifest("synthetic", src_entries, PreprocessRules(), out_dir)
    target = DatasetManifest("real", tgt_entries, PreprocessRules(), out_dir)
    save_manifest(source, out_dir / "source_manifest.json")
    save_manifest(target, out_dir / "target_manifest.json")
    return load_manifest(out_dir / "source_manifest.json"), load_manifest(out_dir / "target_manifest.json")
