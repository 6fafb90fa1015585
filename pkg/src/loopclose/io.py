"""File formats: trajectories (KITTI, TUM), PGM images, feature caches, g2o graphs, datasets.

Every ``load_*`` function has a ``parse_*`` twin that works on in-memory
text or bytes. Parsers only ever raise ``ParseError`` (with a 1-based line
number where one applies), ``EmptyFile`` or ``UnsupportedFormat``.
"""

import json
import math
import os
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .detector import Keyframe, parse_report
from .errors import BadIndex, EmptyFile, LengthMismatch, ParseError, UnsupportedFormat
from .features import DESCRIPTOR_BYTES, InformativeFeature, Keypoint, informativeness_score
from .posegraph import LOOP, ODOMETRY, PoseEdge, PoseGraph, PoseSE2, between, compose, inverse, to_matrix

AXIS_MAPS = ("xy", "xz")
ORTHONORMAL_TOL = 1e-3


class FormatWarning(UserWarning):
    """Input was accepted but deviates from the format's stated tolerances."""


def _decode(data):
    if isinstance(data, str):
        return data
    try:
        return bytes(data).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8 text (byte {exc.start})") from None


def _floats(fields, lineno):
    try:
        vals = [float(f) for f in fields]
    except ValueError:
        raise ParseError("non-numeric field", lineno) from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError("non-finite value", lineno)
    return vals


def _content_lines(text):
    """(line number, stripped line) for non-blank lines that are not ``#`` comments."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line and not line.startswith("#"):
            yield lineno, line


def _read_bytes(path):
    data = Path(path).read_bytes()
    if not data.strip():
        raise EmptyFile(f"{path} is empty")
    return data


def _fmt(v):
    return "%.17g" % v


# ---------------------------------------------------------------- KITTI

def parse_kitti(data):
    """Rows of 12 numbers (row-major [R | t]) -> list of 4x4 arrays."""
    text = _decode(data)
    poses = []
    for lineno, line in _content_lines(text):
        fields = line.split()
        if len(fields) != 12:
            raise ParseError(f"expected 12 fields, got {len(fields)}", lineno)
        T = np.eye(4)
        T[:3, :] = np.array(_floats(fields, lineno)).reshape(3, 4)
        if np.abs(T[:3, :3] @ T[:3, :3].T - np.eye(3)).max() > ORTHONORMAL_TOL:
            warnings.warn(f"line {lineno}: rotation not orthonormal within {ORTHONORMAL_TOL}", FormatWarning)
        poses.append(T)
    if not poses:
        raise EmptyFile("no poses")
    return poses


def format_kitti(poses):
    lines = []
    for T in poses:
        T = np.asarray(T, dtype=float)
        lines.append(" ".join(_fmt(v) for v in T[:3, :4].ravel()))
    return "\n".join(lines) + "\n"


def load_kitti(path):
    return parse_kitti(_read_bytes(path))


def save_kitti(poses, path):
    Path(path).write_text(format_kitti(poses))


# ---------------------------------------------------------------- TUM

@dataclass(frozen=True)
class TimedPose:
    timestamp: float
    pose: np.ndarray  # 4x4


def parse_tum(data):
    """``timestamp tx ty tz qx qy qz qw`` lines; quaternions are normalised, order is preserved."""
    text = _decode(data)
    out = []
    for lineno, line in _content_lines(text):
        fields = line.split()
        if len(fields) != 8:
            raise ParseError(f"expected 8 fields, got {len(fields)}", lineno)
        ts, tx, ty, tz, qx, qy, qz, qw = _floats(fields, lineno)
        norm = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
        if norm < 1e-12:
            raise ParseError("zero quaternion", lineno)
        if abs(norm - 1.0) > ORTHONORMAL_TOL:
            warnings.warn(f"line {lineno}: quaternion norm {norm:.6g} normalised", FormatWarning)
        T = np.eye(4)
        T[:3, :3] = Rotation.from_quat([qx / norm, qy / norm, qz / norm, qw / norm]).as_matrix()
        T[:3, 3] = (tx, ty, tz)
        if out and ts <= out[-1].timestamp:
            warnings.warn(f"line {lineno}: timestamp {ts} not increasing", FormatWarning)
        out.append(TimedPose(ts, T))
    if not out:
        raise EmptyFile("no poses")
    return out


def format_tum(records):
    lines = []
    for rec in records:
        T = np.asarray(rec.pose, dtype=float)
        q = Rotation.from_matrix(T[:3, :3]).as_quat()
        lines.append(" ".join(_fmt(v) for v in (rec.timestamp, *T[:3, 3], *q)))
    return "\n".join(lines) + "\n"


def load_tum(path):
    return parse_tum(_read_bytes(path))


def save_tum(records, path):
    Path(path).write_text(format_tum(records))


# ---------------------------------------------------------------- planar extraction

def planar_pose(T, axis_map="xy"):
    """SE(2) view of a rigid pose.

    ``xy``: (t_x, t_y) and yaw about +z. ``xz`` (camera convention, y down):
    (t_x, t_z) and the rotation of the x-z plane, i.e. minus the angle about +y.
    """
    T = np.asarray(T, dtype=float)
    if axis_map == "xy":
        return PoseSE2(T[0, 3], T[1, 3], math.atan2(T[1, 0], T[0, 0]))
    if axis_map == "xz":
        return PoseSE2(T[0, 3], T[2, 3], -math.atan2(T[0, 2], T[2, 2]))
    raise ValueError(f"unknown axis map {axis_map!r}; expected one of {', '.join(AXIS_MAPS)}")


def _planar_transform(c, axis_map):
    """4x4 world transform acting on the chosen plane as the SE(2) element ``c``."""
    if axis_map == "xy":
        return to_matrix(c)
    co, si = math.cos(c.theta), math.sin(c.theta)
    M = np.eye(4)
    # rotate (x, z) by +theta: x' = co x - si z, z' = si x + co z
    M[0, 0], M[0, 2], M[2, 0], M[2, 2] = co, -si, si, co
    M[0, 3], M[2, 3] = c.x, c.y
    return M


def lift_planar(T, new_planar, axis_map="xy"):
    """Move a 3-D pose so its planar part becomes ``new_planar``; height and tilt ride along."""
    old = planar_pose(T, axis_map)
    correction = compose(new_planar, inverse(old))
    return _planar_transform(correction, axis_map) @ np.asarray(T, dtype=float)


def apply_correction(points, owners, before, after):
    """Carry map points with their owner keyframe: p' = T_after(o) T_before(o)^-1 p (planar; z passes).

    ``points`` is (n, 3) or (n, 2); ``before``/``after`` are PoseSE2 sequences.
    """
    if len(before) != len(after):
        raise LengthMismatch("before and after trajectories differ in length")
    pts = np.array(points, dtype=float).reshape(len(owners), -1)
    out = pts.copy()
    n = len(before)
    for k, o in enumerate(owners):
        if not 0 <= int(o) < n:
            raise BadIndex(f"point {k} owned by keyframe {o}, trajectory has {n}")
        c = compose(after[o], inverse(before[o]))
        co, si = math.cos(c.theta), math.sin(c.theta)
        x, y = pts[k, 0], pts[k, 1]
        out[k, 0] = c.x + co * x - si * y
        out[k, 1] = c.y + si * x + co * y
    return out


# ---------------------------------------------------------------- PGM

def _pgm_tokens(data, count):
    """First ``count`` header tokens and the offset just past the single whitespace that ends them."""
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and data[pos] in b" \t\r\n":
            pos += 1
        if pos < n and data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        if pos >= n:
            raise ParseError(f"truncated header at byte {pos}")
        start = pos
        while pos < n and data[pos] not in b" \t\r\n#":
            pos += 1
        tokens.append(bytes(data[start:pos]))
    if pos >= n or data[pos] not in b" \t\r\n":
        raise ParseError(f"missing whitespace after header at byte {pos}")
    return tokens, pos + 1


def parse_pgm(data):
    data = bytes(data)
    if not data:
        raise EmptyFile("empty image file")
    if data[:2] != b"P5":
        raise UnsupportedFormat(f"magic {data[:2]!r}; only binary P5 greymaps are supported")
    tokens, offset = _pgm_tokens(data, 4)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError("non-integer width, height or maxval") from None
    if w <= 0 or h <= 0:
        raise ParseError(f"bad dimensions {w}x{h}")
    if maxval != 255:
        raise UnsupportedFormat(f"maxval {maxval}; only 255 is supported")
    need = w * h
    body = data[offset:offset + need]
    if len(body) < need:
        raise ParseError(f"truncated pixel data: {len(body)} of {need} bytes")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def format_pgm(img):
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM output needs a 2-D uint8 image")
    return b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]) + img.tobytes()


def load_pgm(path):
    return parse_pgm(Path(path).read_bytes())


def save_pgm(img, path):
    Path(path).write_bytes(format_pgm(img))


# ---------------------------------------------------------------- feature cache

_HEX = re.compile(r"[0-9a-fA-F]{64}")


@dataclass
class FeatureCache:
    k: int
    frames: list = field(default_factory=list)  # (frame index, list of InformativeFeature)


def format_feature_cache(cache):
    lines = [f"LCFC 1 {cache.k}"]
    for index, feats in cache.frames:
        lines.append(f"FRAME {index} {len(feats)}")
        for f in feats:
            kp = f.keypoint
            lines.append(f"FEAT {kp.x} {kp.y} {_fmt(kp.response)} {_fmt(kp.orientation)} {f.score} "
                         f"{f.descriptor.hex()}")
    return "\n".join(lines) + "\n"


def parse_feature_cache(data):
    text = _decode(data)
    lines = list(_content_lines(text))
    if not lines:
        raise EmptyFile("empty feature cache")
    lineno, header = lines[0]
    parts = header.split()
    if len(parts) != 3 or parts[0] != "LCFC":
        raise ParseError("expected header 'LCFC 1 <K>'", lineno)
    if parts[1] != "1":
        raise UnsupportedFormat(f"feature cache version {parts[1]!r}")
    k = _int(parts[2], lineno)
    cache = FeatureCache(k)
    pos = 1
    while pos < len(lines):
        lineno, line = lines[pos]
        parts = line.split()
        if parts[0] != "FRAME" or len(parts) != 3:
            raise ParseError("expected 'FRAME <index> <count>'", lineno)
        index, count = _int(parts[1], lineno), _int(parts[2], lineno)
        if count > k:
            raise ParseError(f"{count} features exceed K = {k}", lineno)
        if cache.frames and index <= cache.frames[-1][0]:
            raise ParseError("frame indices must increase", lineno)
        feats = []
        for n in range(count):
            if pos + 1 + n >= len(lines):
                raise ParseError(f"frame {index} truncated: {n} of {count} features", lineno)
            feats.append(_parse_feat(*lines[pos + 1 + n]))
        cache.frames.append((index, feats))
        pos += 1 + count
    return cache


def _int(tok, lineno):
    try:
        v = int(tok)
    except ValueError:
        raise ParseError(f"expected an integer, got {tok[:20]!r}", lineno) from None
    if v < 0:
        raise ParseError("negative value", lineno)
    return v


def _parse_feat(lineno, line):
    parts = line.split()
    if len(parts) != 7 or parts[0] != "FEAT":
        raise ParseError("expected 'FEAT x y response orientation score hex'", lineno)
    x, y, score = _int(parts[1], lineno), _int(parts[2], lineno), _int(parts[5], lineno)
    response, orient = _floats(parts[3:5], lineno)
    if not _HEX.fullmatch(parts[6]):
        raise ParseError("descriptor must be 64 hex characters", lineno)
    desc = bytes.fromhex(parts[6])
    if informativeness_score(desc) != score:
        raise ParseError("score does not match descriptor popcount", lineno)
    return InformativeFeature(Keypoint(x, y, response, orient), desc, score)


def load_feature_cache(path):
    return parse_feature_cache(_read_bytes(path))


def save_feature_cache(cache, path):
    Path(path).write_text(format_feature_cache(cache))


# ---------------------------------------------------------------- g2o

def format_g2o(graph):
    lines = []
    for i, v in enumerate(graph.vertices):
        lines.append(f"VERTEX_SE2 {i} {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}")
    lines.append(f"FIX {graph.anchor}")
    for e in graph.edges:
        m, om = e.measurement, e.information
        info = (om[0, 0], om[0, 1], om[0, 2], om[1, 1], om[1, 2], om[2, 2])
        lines.append(f"EDGE_SE2 {e.from_index} {e.to_index} {_fmt(m.x)} {_fmt(m.y)} {_fmt(m.theta)} "
                     + " ".join(_fmt(v) for v in info))
    return "\n".join(lines) + "\n"


def parse_g2o(data):
    """VERTEX_SE2 / EDGE_SE2 / FIX records. Edges with to = from + 1 are odometry, others loops."""
    text = _decode(data)
    verts, edges, anchor = {}, [], None
    for lineno, line in _content_lines(text):
        parts = line.split()
        tag = parts[0]
        if tag == "VERTEX_SE2":
            if len(parts) != 5:
                raise ParseError("VERTEX_SE2 needs id x y theta", lineno)
            vid = _int(parts[1], lineno)
            if vid in verts:
                raise ParseError(f"duplicate vertex {vid}", lineno)
            verts[vid] = _floats(parts[2:], lineno)
        elif tag == "EDGE_SE2":
            if len(parts) != 12:
                raise ParseError("EDGE_SE2 needs from to dx dy dtheta and 6 information entries", lineno)
            a, b = _int(parts[1], lineno), _int(parts[2], lineno)
            vals = _floats(parts[3:], lineno)
            i11, i12, i13, i22, i23, i33 = vals[3:]
            info = np.array([[i11, i12, i13], [i12, i22, i23], [i13, i23, i33]])
            edges.append((lineno, a, b, PoseSE2(*vals[:3]), info))
        elif tag == "FIX":
            if len(parts) != 2:
                raise ParseError("FIX needs one vertex id", lineno)
            anchor = _int(parts[1], lineno)
        else:
            raise ParseError(f"unknown record {tag[:20]!r}", lineno)
    if not verts:
        raise EmptyFile("no vertices")
    n = len(verts)
    if sorted(verts) != list(range(n)):
        raise ParseError("vertex ids must be 0..n-1")
    built = []
    for lineno, a, b, meas, info in edges:
        if a >= n or b >= n or a == b:
            raise ParseError(f"edge ({a}, {b}) references missing vertices", lineno)
        try:
            built.append(PoseEdge(a, b, meas, info, ODOMETRY if b == a + 1 else LOOP))
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    if anchor is not None and anchor >= n:
        raise ParseError(f"FIX references missing vertex {anchor}")
    try:
        return PoseGraph(np.array([verts[i] for i in range(n)]), built, anchor or 0)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def load_g2o(path):
    return parse_g2o(_read_bytes(path))


def save_g2o(graph, path):
    Path(path).write_text(format_g2o(graph))


# ---------------------------------------------------------------- revisits and reports

def format_revisits(pairs):
    return "# i j (ground-truth revisit pairs)\n" + "".join(f"{i} {j}\n" for i, j in pairs)


def parse_revisits(data):
    text = _decode(data)
    pairs = []
    for lineno, line in _content_lines(text):
        parts = line.split()
        if len(parts) != 2:
            raise ParseError("expected 'i j'", lineno)
        i, j = _int(parts[0], lineno), _int(parts[1], lineno)
        if i >= j:
            raise ParseError("revisit pair must have i < j", lineno)
        pairs.append((i, j))
    return pairs


def parse_detection_report(data):
    return parse_report(_decode(data))


def load_detection_report(path):
    return parse_detection_report(Path(path).read_bytes())


# ---------------------------------------------------------------- synthetic dataset directories

def save_dataset(dataset, out_dir):
    """Write a SynthDataset: spec, both trajectories, revisits and images or a feature cache."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(dataset.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    save_kitti([to_matrix(p) for p in dataset.gt_poses], out / "gt.txt")
    save_kitti([kf.pose for kf in dataset.keyframes], out / "odom.txt")
    (out / "revisits.txt").write_text(format_revisits(dataset.revisit_pairs))
    if dataset.keyframes[0].image is not None:
        (out / "images").mkdir(exist_ok=True)
        (out / "masks").mkdir(exist_ok=True)
        for kf in dataset.keyframes:
            save_pgm(kf.image, out / "images" / f"{kf.index:06d}.pgm")
            if kf.mask is not None:
                save_pgm(np.where(kf.mask, 255, 0).astype(np.uint8), out / "masks" / f"{kf.index:06d}.pgm")
    else:
        cache = FeatureCache(max(len(kf.features) for kf in dataset.keyframes),
                             [(kf.index, kf.features) for kf in dataset.keyframes])
        save_feature_cache(cache, out / "features.lcfc")


def load_keyframes(directory, trajectory="odom.txt", fmt="kitti"):
    """Keyframes from a dataset directory (images/ + masks/ or features.lcfc) and a trajectory."""
    d = Path(directory)
    traj = d / trajectory if not os.path.isabs(str(trajectory)) else Path(trajectory)
    poses = load_trajectory(traj, fmt)
    if (d / "features.lcfc").exists():
        cache = load_feature_cache(d / "features.lcfc")
        if len(cache.frames) != len(poses):
            raise LengthMismatch(f"{len(cache.frames)} feature frames vs {len(poses)} poses")
        return [Keyframe(idx, T, features=f) for (idx, f), T in zip(cache.frames, poses)]
    images = sorted((d / "images").glob("*.pgm"))
    if len(images) != len(poses):
        raise LengthMismatch(f"{len(images)} images vs {len(poses)} poses")
    frames = []
    for k, (img_path, T) in enumerate(zip(images, poses)):
        mask_path = d / "masks" / img_path.name
        mask = load_pgm(mask_path) > 0 if mask_path.exists() else None
        frames.append(Keyframe(k, T, image=load_pgm(img_path), mask=mask))
    return frames


def load_dataset(directory):
    """Rebuild a SynthDataset written by ``save_dataset``."""
    from .synth import SynthDataset, WorldSpec

    d = Path(directory)
    try:
        spec = WorldSpec.from_dict(json.loads((d / "spec.json").read_text()))
    except json.JSONDecodeError as exc:
        raise ParseError(f"spec.json: {exc.msg}", exc.lineno) from None
    gt = [planar_pose(T) for T in load_kitti(d / "gt.txt")]
    keyframes = load_keyframes(d)
    odom = [planar_pose(kf.pose) for kf in keyframes]
    pairs = parse_revisits((d / "revisits.txt").read_bytes())
    return SynthDataset(spec, gt, odom, keyframes, pairs, name=d.name)


def load_trajectory(path, fmt="kitti"):
    """4x4 poses from a KITTI or TUM file."""
    if fmt == "kitti":
        return load_kitti(path)
    if fmt == "tum":
        return [r.pose for r in load_tum(path)]
    raise ValueError(f"unknown trajectory format {fmt!r}")


def save_trajectory(poses, path, fmt="kitti", timestamps=None):
    if fmt == "kitti":
        save_kitti(poses, path)
    elif fmt == "tum":
        ts = timestamps if timestamps is not None else range(len(poses))
        save_tum([TimedPose(float(t), T) for t, T in zip(ts, poses)], path)
    else:
        raise ValueError(f"unknown trajectory format {fmt!r}")


def loop_measurements(events, gt_planar=None):
    """Relative pose per loop event: ground truth when supplied, identity otherwise."""
    out = []
    for e in events:
        if gt_planar is None:
            out.append(PoseSE2())
        else:
            out.append(between(gt_planar[e.matched_index], gt_planar[e.current_index]))
    return out
