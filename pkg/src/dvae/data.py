"""Procedural desk-scale dataset: generation, on-disk format, ingestion.

The generator renders a 5-joint articulated stick figure (a palm bone, a
two-segment finger, a thumb) as anti-aliased capsules over one of three
procedural background families, orthographic projection along the camera z
axis.  Every sample carries a full set of self-consistent labels: absolute
pose, canonical pose, viewpoint rotation, and a background-only tag image.

On-disk layout:  manifest.txt, images/NNNNNN.png, tags/NNNNNN.png.
The manifest is one header line (version, joint count, image size) followed
by one whitespace-separated record per line:

    images/NNNNNN.png  <3*J pose floats>  <9 viewpoint floats>  <content id>  <6 nuisance floats>

Floats are written with repr precision so a write/read round trip is exact.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, GenerationError, ManifestError, NumericError
from .geometry import CanonicalPose, Pose3D, Viewpoint, canonicalize, compose, viewpoint_from_euler

MANIFEST_NAME = "manifest.txt"
MANIFEST_VERSION = 1
JOINT_COUNT = 5
NUISANCE_DIM = 6
BONES = ((0, 1), (1, 2), (2, 3), (0, 4))  # palm, finger proximal/distal, thumb

# articulation: (finger bend, finger spread, finger curl, thumb bend, thumb spread)
ANGLE_LIMITS = np.array(
    [(0.35, 1.25), (-0.55, 0.55), (0.15, 1.00), (0.50, 1.20), (-0.50, 0.50)]
)
# viewpoint: (tilt about x, turn about y, spin about the camera axis)
VIEW_LIMITS = np.array([(-0.8, 0.8), (-0.8, 0.8), (-np.pi, np.pi)])
ROOT_RANGE = 0.35
SCALE_RANGE = (0.85, 1.15)
SPLIT_STREAMS = {"train": 0, "test": 1}
PRESETS = {"desk32": 32, "desk64": 64}

LABEL_NAMES = ("pose3d", "cpose", "viewpoint", "content_tag")


@dataclass(frozen=True)
class SceneParams:
    """Everything that determines one rendered sample."""

    articulation: np.ndarray
    view_angles: np.ndarray
    content_id: int
    content_nuisance: np.ndarray
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "articulation", np.asarray(self.articulation, dtype=np.float64))
        object.__setattr__(self, "view_angles", np.asarray(self.view_angles, dtype=np.float64))
        object.__setattr__(self, "content_nuisance", np.asarray(self.content_nuisance, dtype=np.float64))

    def key(self) -> str:
        h = hashlib.sha256()
        h.update(self.articulation.tobytes())
        h.update(self.view_angles.tobytes())
        h.update(np.int64(self.content_id).tobytes())
        h.update(self.content_nuisance.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Sample:
    """One record: image plus whichever labels the mask exposes."""

    image: np.ndarray
    label_mask: frozenset
    pose3d: Pose3D | None = None
    cpose: CanonicalPose | None = None
    viewpoint: Viewpoint | None = None
    content_tag: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "label_mask", frozenset(self.label_mask))
        for name in self.label_mask:
            if name not in LABEL_NAMES:
                raise ManifestError(f"unknown label name {name!r}")
        for name in LABEL_NAMES:
            present = getattr(self, name) is not None
            if present != (name in self.label_mask):
                raise ManifestError(
                    f"label {name!r} {'present' if present else 'missing'} but mask says otherwise"
                )

    def root_and_scale(self):
        """Ground-truth root/scale of the absolute pose (given at test time)."""
        _, _, root, scale = canonicalize(self.pose3d)
        return root, scale


def validate_sample(sample: Sample, tol: float = 1e-5) -> None:
    """Check the compose identity linking the three pose labels."""
    if {"pose3d", "cpose", "viewpoint"} <= sample.label_mask:
        root, scale = sample.root_and_scale()
        rebuilt = compose(sample.cpose, sample.viewpoint, root, scale)
        err = np.abs(rebuilt.joints - sample.pose3d.joints).max()
        if err > tol:
            raise NumericError(f"pose labels inconsistent: compose error {err:.2e}")


def _rotate_about(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    c, s = np.cos(angle), np.sin(angle)
    return v * c + np.cross(axis, v) * s + axis * np.dot(axis, v) * (1 - c)


def build_local_skeleton(angles: np.ndarray) -> np.ndarray:
    """Articulated 5-joint skeleton in its local frame (root at 0, palm +y).

    The finger bends toward +x and curls consistently away from the palm
    axis; the thumb sits on the -x side.  The asymmetry keeps mirror poses
    outside the articulation manifold, which keeps monocular views of the
    figure depth-unambiguous.
    """
    bend, spread, curl, t_bend, t_spread = angles
    ey = np.array([0.0, 1.0, 0.0])
    joints = np.zeros((JOINT_COUNT, 3))
    joints[1] = ey
    d1 = np.array(
        [np.sin(bend) * np.cos(spread), np.cos(bend), np.sin(bend) * np.sin(spread)]
    )
    joints[2] = joints[1] + 0.45 * d1
    curl_axis = np.cross(ey, d1)
    d2 = _rotate_about(d1, curl_axis, curl)
    joints[3] = joints[2] + 0.35 * d2
    dt = np.array(
        [-np.sin(t_bend) * np.cos(t_spread), -np.cos(t_bend), np.sin(t_bend) * np.sin(t_spread)]
    )
    joints[4] = 0.5 * dt
    return joints


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, float(np.clip(s, 0, 1)), float(np.clip(v, 0, 1))))


def render_background(content_id: int, nu: np.ndarray, size: int) -> np.ndarray:
    """One of three continuous background families, RGB floats in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    if content_id == 0:  # flat color
        color = _hsv(nu[0], 0.2 + 0.5 * nu[1], 0.25 + 0.6 * nu[2])
        return np.broadcast_to(color, (size, size, 3)).copy()
    if content_id == 1:  # linear gradient between two colors
        c1 = _hsv(nu[0], 0.3 + 0.4 * nu[1], 0.30 + 0.55 * nu[2])
        c2 = _hsv(nu[3], 0.3 + 0.4 * nu[1], 0.30 + 0.55 * nu[5])
        theta = 2 * np.pi * nu[4]
        t = (xx - 0.5) * np.cos(theta) + (yy - 0.5) * np.sin(theta) + 0.5
        t = np.clip(t, 0.0, 1.0)[..., None]
        return c1 * (1 - t) + c2 * t
    if content_id == 2:  # sinusoidal texture
        base = _hsv(nu[0], 0.3 + 0.4 * nu[1], 0.35 + 0.45 * nu[2])
        freq, orient, phase = 1.0 + 3.0 * nu[3], np.pi * nu[4], 2 * np.pi * nu[5]
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(orient) + yy * np.sin(orient)) + phase)
        return np.clip(base + 0.2 * wave[..., None], 0.0, 1.0)
    raise GenerationError(f"unknown content family {content_id}")


def _render_skeleton(background: np.ndarray, pose: Pose3D, size: int) -> np.ndarray:
    """Composite anti-aliased depth-shaded capsules over the background."""
    k = size / 4.8  # world window chosen so the figure always fits
    px = pose.joints[:, 0] * k + size / 2.0
    py = size / 2.0 - pose.joints[:, 1] * k
    pz = pose.joints[:, 2]
    radius = max(1.2, size / 26.0)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    img = background.copy()
    order = sorted(range(len(BONES)), key=lambda i: (pz[BONES[i][0]] + pz[BONES[i][1]]))
    base = np.array([0.95, 0.82, 0.70])
    for i in order:
        a, b = BONES[i]
        pa = np.array([px[a], py[a]])
        d = np.array([px[b], py[b]]) - pa
        denom = max(float(d @ d), 1e-12)
        t = np.clip(((xx - pa[0]) * d[0] + (yy - pa[1]) * d[1]) / denom, 0.0, 1.0)
        dist = np.hypot(xx - (pa[0] + t * d[0]), yy - (pa[1] + t * d[1]))
        alpha = np.clip(0.5 + (radius - dist), 0.0, 1.0)[..., None]
        z_mid = 0.5 * (pz[a] + pz[b])
        shade = 0.55 + 0.45 * float(np.clip(0.5 + z_mid / 4.0, 0.0, 1.0))
        img = img * (1 - alpha) + base * shade * alpha
    return img


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _to_unit_range(u8: np.ndarray) -> np.ndarray:
    return (u8.astype(np.float32) / 127.5) - 1.0


def generate_sample(params: SceneParams, image_size: int = 32) -> Sample:
    """Deterministic render of one fully labelled sample.

    The returned image has already been through 8-bit quantization, so it is
    bit-identical to what a PNG write/read round trip produces.
    """
    art, view = params.articulation, params.view_angles
    if art.shape != (len(ANGLE_LIMITS),):
        raise GenerationError(f"expected {len(ANGLE_LIMITS)} articulation angles, got {art.shape}")
    if np.any(art < ANGLE_LIMITS[:, 0] - 1e-12) or np.any(art > ANGLE_LIMITS[:, 1] + 1e-12):
        raise GenerationError(f"articulation angles outside limits: {art}")
    if np.any(view < VIEW_LIMITS[:, 0] - 1e-12) or np.any(view > VIEW_LIMITS[:, 1] + 1e-12):
        raise GenerationError(f"viewpoint angles outside limits: {view}")

    local = build_local_skeleton(art)
    cpose, _, _, _ = canonicalize(Pose3D(local))
    view_rot = viewpoint_from_euler(*view)
    rng = np.random.default_rng(params.seed)
    root = np.array([rng.uniform(-ROOT_RANGE, ROOT_RANGE), rng.uniform(-ROOT_RANGE, ROOT_RANGE), 0.0])
    scale = rng.uniform(*SCALE_RANGE)
    pose3d = compose(cpose, view_rot, root, scale)

    background = render_background(params.content_id, params.content_nuisance, image_size)
    image = _to_unit_range(_quantize(_render_skeleton(background, pose3d, image_size)))
    tag = _to_unit_range(_quantize(background))
    return Sample(
        image=image,
        pose3d=pose3d,
        cpose=cpose,
        viewpoint=view_rot,
        content_tag=tag,
        label_mask=frozenset(LABEL_NAMES),
    )


def sample_scene_params(rng: np.random.Generator) -> SceneParams:
    """Uniform draw of scene parameters within the generator's limits."""
    return SceneParams(
        articulation=rng.uniform(ANGLE_LIMITS[:, 0], ANGLE_LIMITS[:, 1]),
        view_angles=rng.uniform(VIEW_LIMITS[:, 0], VIEW_LIMITS[:, 1]),
        content_id=int(rng.integers(0, 3)),
        content_nuisance=rng.uniform(0.0, 1.0, NUISANCE_DIM),
        seed=int(rng.integers(0, 2**62)),
    )


def _fmt_floats(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values).ravel())


def generate_dataset(out_dir, n: int, seed: int, preset: str = "desk32", split: str = "train"):
    """Render n samples to disk and write the manifest; returns the manifest path.

    Train and test splits draw from disjoint seed streams, so the same
    ``seed`` never produces overlapping scene parameters across splits.
    """
    if n < 1:
        raise GenerationError(f"n must be >= 1, got {n}")
    if preset not in PRESETS:
        raise GenerationError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
    if split not in SPLIT_STREAMS:
        raise GenerationError(f"unknown split {split!r}; have {sorted(SPLIT_STREAMS)}")
    size = PRESETS[preset]
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "tags").mkdir(parents=True, exist_ok=True)

    children = np.random.SeedSequence([int(seed), SPLIT_STREAMS[split]]).spawn(n)
    lines = [f"dvae-manifest version={MANIFEST_VERSION} joints={JOINT_COUNT} image_size={size}"]
    for i, child in enumerate(children):
        params = sample_scene_params(np.random.default_rng(child))
        sample = generate_sample(params, size)
        name = f"{i:06d}.png"
        Image.fromarray(_quantize((sample.image + 1.0) / 2.0)).save(out_dir / "images" / name)
        Image.fromarray(_quantize((sample.content_tag + 1.0) / 2.0)).save(out_dir / "tags" / name)
        lines.append(
            " ".join(
                [
                    f"images/{name}",
                    _fmt_floats(sample.pose3d.joints),
                    _fmt_floats(sample.viewpoint.rotation),
                    str(params.content_id),
                    _fmt_floats(params.content_nuisance),
                ]
            )
        )
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def parse_policy(policy: str):
    """'full' | 'semi:M' | 'weak_viewpoint:M' -> (kind, percent)."""
    if policy == "full":
        return "full", 100.0
    for kind in ("semi", "weak_viewpoint"):
        if policy.startswith(kind + ":"):
            pct = float(policy.split(":", 1)[1])
            if not 0.0 <= pct <= 100.0:
                raise ManifestError(f"policy percentage out of range: {policy}")
            return kind, pct
    raise ManifestError(f"unknown label mask policy {policy!r}")


def _parse_header(line: str):
    parts = line.split()
    try:
        if parts[0] != "dvae-manifest":
            raise ValueError("bad magic")
        fields = dict(p.split("=", 1) for p in parts[1:])
        version, joints, size = int(fields["version"]), int(fields["joints"]), int(fields["image_size"])
    except (ValueError, KeyError, IndexError) as exc:
        raise ManifestError(f"manifest line 1: malformed header {line!r}") from exc
    if version != MANIFEST_VERSION:
        raise ManifestError(f"manifest version {version} != supported {MANIFEST_VERSION}")
    return joints, size


def load_image(path) -> np.ndarray:
    return _to_unit_range(np.asarray(Image.open(path).convert("RGB")))


def load_dataset(path, label_mask_policy: str = "full") -> list[Sample]:
    """Read a dataset directory into Samples, applying a label-mask policy.

    Policies hide labels, never alter stored data: 'semi:M' keeps all labels
    on the first M% of records and none on the rest; 'weak_viewpoint:M'
    keeps all labels on the first M% and only the viewpoint on the rest.
    """
    path = Path(path)
    manifest = path / MANIFEST_NAME if path.is_dir() else path
    base = manifest.parent
    if not manifest.exists():
        raise ManifestError(f"no manifest at {manifest}")
    lines = manifest.read_text().splitlines()
    if not lines:
        raise ManifestError(f"manifest {manifest} is empty")
    joints, _ = _parse_header(lines[0])
    kind, pct = parse_policy(label_mask_policy)
    records = [(i + 2, ln) for i, ln in enumerate(lines[1:]) if ln.strip()]
    n_labelled = int(round(len(records) * pct / 100.0))

    samples = []
    expected = 1 + 3 * joints + 9 + 1 + NUISANCE_DIM
    for idx, (lineno, line) in enumerate(records):
        tokens = line.split()
        if len(tokens) != expected:
            raise ManifestError(
                f"manifest line {lineno} (record {idx}): expected {expected} fields, got {len(tokens)}"
            )
        rel = tokens[0]
        try:
            floats = [float(t) for t in tokens[1:]]
        except ValueError as exc:
            raise ManifestError(f"manifest line {lineno} (record {idx}): bad float: {exc}") from exc
        pose = Pose3D(np.array(floats[: 3 * joints]).reshape(joints, 3))
        viewpoint = Viewpoint(np.array(floats[3 * joints : 3 * joints + 9]).reshape(3, 3))
        image = load_image(base / rel)
        tag_path = base / "tags" / Path(rel).name
        tag = load_image(tag_path) if tag_path.exists() else None

        fully_labelled = kind == "full" or idx < n_labelled
        if fully_labelled:
            cpose, _, _, _ = canonicalize(pose)
            mask = {"pose3d", "cpose", "viewpoint"} | ({"content_tag"} if tag is not None else set())
            samples.append(
                Sample(image=image, pose3d=pose, cpose=cpose, viewpoint=viewpoint,
                       content_tag=tag, label_mask=frozenset(mask))
            )
        elif kind == "weak_viewpoint":
            samples.append(Sample(image=image, viewpoint=viewpoint, label_mask=frozenset({"viewpoint"})))
        else:
            samples.append(Sample(image=image, label_mask=frozenset()))
    return samples


def ingest_external(annotation_path, fmt: str, out_dir):
    """Convert an rhd_like/stb_like annotation file to a native manifest.

    Images are referenced from the new manifest, never copied.  The
    viewpoint field is derived by canonicalizing each pose; content fields
    are filled with the -1 sentinel.  Returns the manifest path.
    """
    annotation_path, out_dir = Path(annotation_path), Path(out_dir)
    if fmt == "rhd_like":
        records = _read_rhd_like(annotation_path)
    elif fmt == "stb_like":
        records = _read_stb_like(annotation_path)
    else:
        raise FormatError(f"unknown ingestion format {fmt!r}; have rhd_like, stb_like")

    out_dir.mkdir(parents=True, exist_ok=True)
    joints = 21
    size = 0
    first_img = (annotation_path.parent / records[0][0]).resolve()
    if first_img.exists():
        with Image.open(first_img) as im:
            if im.size[0] == im.size[1]:
                size = im.size[0]
    lines = [f"dvae-manifest version={MANIFEST_VERSION} joints={joints} image_size={size}"]
    for rel_image, xyz in records:
        resolved = (annotation_path.parent / rel_image).resolve()
        pose = Pose3D(xyz)
        _, viewpoint, _, _ = canonicalize(pose)
        lines.append(
            " ".join(
                [str(resolved), _fmt_floats(xyz), _fmt_floats(viewpoint.rotation), "-1",
                 _fmt_floats(np.zeros(NUISANCE_DIM))]
            )
        )
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def _read_rhd_like(path: Path):
    """JSON schema: {"records": [{"image": str, "xyz_mm": [[x,y,z] * 21]}]}."""
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot parse {path} as JSON: {exc}") from exc
    if not isinstance(doc, dict) or "records" not in doc:
        raise FormatError("records: missing top-level list")
    out = []
    for i, rec in enumerate(doc["records"]):
        if "image" not in rec:
            raise FormatError(f"records[{i}].image: missing")
        xyz = rec.get("xyz_mm")
        if xyz is None:
            raise FormatError(f"records[{i}].xyz_mm: missing")
        if len(xyz) != 21:
            raise FormatError(f"records[{i}].xyz_mm: expected 21 joints, got {len(xyz)}")
        arr = np.asarray(xyz, dtype=np.float64)
        if arr.shape != (21, 3):
            raise FormatError(f"records[{i}].xyz_mm: joints must be [x, y, z] triples")
        out.append((rec["image"], arr))
    if not out:
        raise FormatError("records: empty")
    return out


def _read_stb_like(path: Path):
    """Line schema: <image path> followed by 63 floats (21 joints * xyz, mm)."""
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 64:
            raise FormatError(
                f"line {lineno}: expected 64 fields (path + 21*3 coords), got {len(tokens)}"
            )
        try:
            coords = np.array([float(t) for t in tokens[1:]]).reshape(21, 3)
        except ValueError as exc:
            raise FormatError(f"line {lineno}: bad coordinate: {exc}") from exc
        out.append((tokens[0], coords))
    if not out:
        raise FormatError(f"{path}: no records")
    return out
