"""Planar pose graph and its Levenberg-Marquardt solver.

Vertices are SE(2) poses ``(x, y, theta)``; an edge stores the measured pose
of ``to`` in the frame of ``from``. The residual of an edge is the SE(2)
logarithm of ``measurement^-1 * (from^-1 * to)`` and the solver minimises
the sum of ``r^T Omega r`` with one vertex held fixed.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import BadIndex, BadInformation, Disconnected, Diverged, TooFewPoses

ODOMETRY = "odometry"
LOOP = "loop"

DEFAULT_ODOM_INFO = np.diag([100.0, 100.0, 400.0])
DEFAULT_LOOP_INFO = np.diag([1000.0, 1000.0, 4000.0])

LAMBDA_INIT = 1e-4
LAMBDA_MAX = 1e8


def normalize_angle(a):
    """Wrap to (-pi, pi]; works on scalars and arrays."""
    wrapped = math.pi - np.mod(math.pi - np.asarray(a, dtype=float), 2.0 * math.pi)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


@dataclass(frozen=True)
class PoseSE2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def as_array(self):
        return np.array([self.x, self.y, self.theta])

    @classmethod
    def from_array(cls, v):
        return cls(v[0], v[1], v[2])


def compose(a, b):
    c, s = math.cos(a.theta), math.sin(a.theta)
    return PoseSE2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.theta + b.theta)


def inverse(a):
    c, s = math.cos(a.theta), math.sin(a.theta)
    return PoseSE2(-c * a.x - s * a.y, s * a.x - c * a.y, -a.theta)


def between(a, b):
    """Pose of ``b`` expressed in the frame of ``a``."""
    return compose(inverse(a), b)


def _check_information(info):
    info = np.array(info, dtype=float)
    if info.shape != (3, 3) or not np.all(np.isfinite(info)):
        raise BadInformation("information must be a finite 3x3 matrix")
    if not np.allclose(info, info.T, rtol=1e-12, atol=1e-12):
        raise BadInformation("information matrix is not symmetric")
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise BadInformation("information matrix is not positive definite") from None
    return info


@dataclass(frozen=True, eq=False)
class PoseEdge:
    from_index: int
    to_index: int
    measurement: PoseSE2
    information: np.ndarray
    kind: str = ODOMETRY

    def __post_init__(self):
        if self.from_index == self.to_index:
            raise BadIndex("edge endpoints must differ")
        info = _check_information(self.information)
        info.setflags(write=False)
        object.__setattr__(self, "information", info)

    def same_as(self, other):
        return (
            (self.from_index, self.to_index, self.measurement, self.kind)
            == (other.from_index, other.to_index, other.measurement, other.kind)
            and np.array_equal(self.information, other.information)
        )


@dataclass(eq=False)
class PoseGraph:
    vertices: np.ndarray  # (n, 3): x, y, theta
    edges: list = field(default_factory=list)
    anchor: int = 0

    def __post_init__(self):
        self.vertices = np.array(self.vertices, dtype=float).reshape(-1, 3)
        for e in self.edges:
            self._check_edge(e)
        if not 0 <= self.anchor < max(len(self.vertices), 1):
            raise BadIndex(f"anchor {self.anchor} out of range")

    def _check_edge(self, e):
        n = len(self.vertices)
        if not (0 <= e.from_index < n and 0 <= e.to_index < n):
            raise BadIndex(f"edge ({e.from_index}, {e.to_index}) references a missing vertex")

    def __len__(self):
        return len(self.vertices)

    def pose(self, i):
        return PoseSE2.from_array(self.vertices[i])

    def poses(self):
        return [PoseSE2.from_array(v) for v in self.vertices]

    def copy(self):
        return PoseGraph(self.vertices.copy(), list(self.edges), self.anchor)

    def same_as(self, other):
        return (
            self.anchor == other.anchor
            and np.array_equal(self.vertices, other.vertices)
            and len(self.edges) == len(other.edges)
            and all(a.same_as(b) for a, b in zip(self.edges, other.edges))
        )

    def loop_edges(self):
        return [e for e in self.edges if e.kind == LOOP]


def build_from_trajectory(poses, odom_info=DEFAULT_ODOM_INFO):
    """Chain graph: one vertex per pose, odometry edges (i, i+1) consistent with the poses."""
    poses = [p if isinstance(p, PoseSE2) else PoseSE2.from_array(p) for p in poses]
    if len(poses) < 2:
        raise TooFewPoses("a pose graph needs at least 2 poses")
    edges = [PoseEdge(i, i + 1, between(poses[i], poses[i + 1]), odom_info, ODOMETRY)
             for i in range(len(poses) - 1)]
    return PoseGraph(np.array([p.as_array() for p in poses]), edges, 0)


def add_loop_edge(graph, candidate, measurement, loop_info=DEFAULT_LOOP_INFO):
    """New graph with a loop edge matched -> current appended.

    ``candidate`` is a LoopCandidate or a ``(current_index, matched_index)`` pair.
    """
    if hasattr(candidate, "matched_index"):
        cur, matched = candidate.current_index, candidate.matched_index
    else:
        cur, matched = candidate
    n = len(graph)
    if not (0 <= cur < n and 0 <= matched < n):
        raise BadIndex(f"loop ({matched}, {cur}) outside graph of {n} vertices")
    out = graph.copy()
    out.edges.append(PoseEdge(matched, cur, measurement, loop_info, LOOP))
    return out


def remove_edge(graph, index):
    out = graph.copy()
    try:
        del out.edges[index]
    except IndexError:
        raise BadIndex(f"no edge {index}") from None
    return out


# ---------------------------------------------------------------- residuals

def _log_scale(theta):
    """alpha = (theta/2) cot(theta/2) and its derivative, series near 0."""
    small = np.abs(theta) < 1e-4
    h = np.where(small, 1.0, theta / 2.0)
    alpha = np.where(small, 1.0 - theta**2 / 12.0, h / np.tan(h))
    dalpha = np.where(small, -theta / 6.0, 0.5 * (1.0 / np.tan(h) - h / np.sin(h) ** 2))
    return alpha, dalpha


def residuals_and_jacobians(va, vb, meas, with_jacobians=True):
    """Vectorised edge residuals ``(m, 3)`` and Jacobians wrt from/to vertices ``(m, 3, 3)``."""
    va, vb, meas = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (va, vb, meas))
    ca, sa = np.cos(va[:, 2]), np.sin(va[:, 2])
    cm, sm = np.cos(meas[:, 2]), np.sin(meas[:, 2])
    dx, dy = vb[:, 0] - va[:, 0], vb[:, 1] - va[:, 1]
    zx, zy = ca * dx + sa * dy, -sa * dx + ca * dy
    ux, uy = zx - meas[:, 0], zy - meas[:, 1]
    tx, ty = cm * ux + sm * uy, -sm * ux + cm * uy
    th = normalize_angle(vb[:, 2] - va[:, 2] - meas[:, 2])
    alpha, dalpha = _log_scale(th)
    half = th / 2.0
    r = np.stack([alpha * tx + half * ty, -half * tx + alpha * ty, th], axis=1)
    if not with_jacobians:
        return r
    m = len(va)
    # d(t_err)/d(param): R_M^T applied to d(z)/d(param)
    def rot_m(gx, gy):
        return cm * gx + sm * gy, -sm * gx + cm * gy

    # d(r_rho)/d(theta_err) = W'(theta) t_err
    wtx = dalpha * tx + 0.5 * ty
    wty = -0.5 * tx + dalpha * ty

    def rho(gx, gy, dth):
        ex, ey = rot_m(gx, gy)
        return alpha * ex + half * ey + wtx * dth, -half * ex + alpha * ey + wty * dth

    ja = np.zeros((m, 3, 3))
    jb = np.zeros((m, 3, 3))
    zeros, ones = np.zeros(m), np.ones(m)
    cols_a = [(-ca, sa, zeros), (-sa, -ca, zeros), (zy, -zx, -ones)]
    cols_b = [(ca, -sa, zeros), (sa, ca, zeros), (zeros, zeros, ones)]
    for k, (gx, gy, dth) in enumerate(cols_a):
        ja[:, 0, k], ja[:, 1, k] = rho(gx, gy, dth)
        ja[:, 2, k] = dth
    for k, (gx, gy, dth) in enumerate(cols_b):
        jb[:, 0, k], jb[:, 1, k] = rho(gx, gy, dth)
        jb[:, 2, k] = dth
    return r, ja, jb


def _edge_arrays(graph):
    fr = np.array([e.from_index for e in graph.edges], dtype=np.int64)
    to = np.array([e.to_index for e in graph.edges], dtype=np.int64)
    meas = np.array([e.measurement.as_array() for e in graph.edges]).reshape(-1, 3)
    info = np.array([e.information for e in graph.edges]).reshape(-1, 3, 3)
    return fr, to, meas, info


def edge_residual(edge, graph):
    return residuals_and_jacobians(graph.vertices[edge.from_index], graph.vertices[edge.to_index],
                                   edge.measurement.as_array(), with_jacobians=False)[0]


def edge_jacobians(edge, graph):
    _, ja, jb = residuals_and_jacobians(graph.vertices[edge.from_index], graph.vertices[edge.to_index],
                                        edge.measurement.as_array())
    return ja[0], jb[0]


def objective(graph, vertices=None):
    """Sum of r^T Omega r over all edges."""
    if not graph.edges:
        return 0.0
    v = graph.vertices if vertices is None else vertices
    fr, to, meas, info = _edge_arrays(graph)
    r = residuals_and_jacobians(v[fr], v[to], meas, with_jacobians=False)
    return float(np.einsum("mi,mij,mj->", r, info, r))


def is_connected(graph):
    n = len(graph)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for e in graph.edges:
        parent[find(e.from_index)] = find(e.to_index)
    return len({find(i) for i in range(n)}) <= 1


@dataclass
class OptimizeStats:
    iterations: int
    initial_objective: float
    final_objective: float
    history: list
    converged: bool


def _normal_equations(graph, vertices, fr, to, meas, info):
    n = len(vertices)
    r, ja, jb = residuals_and_jacobians(vertices[fr], vertices[to], meas)
    # per-edge blocks J^T Omega J and J^T Omega r
    oa = np.einsum("mki,mkl->mil", ja, info)
    ob = np.einsum("mki,mkl->mil", jb, info)
    haa = np.einsum("mil,mlj->mij", oa, ja)
    hab = np.einsum("mil,mlj->mij", oa, jb)
    hbb = np.einsum("mil,mlj->mij", ob, jb)
    ga = np.einsum("mil,ml->mi", oa, r)
    gb = np.einsum("mil,ml->mi", ob, r)

    ii, jj = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
    rows, cols, vals = [], [], []
    for blocks, ri, ci in ((haa, fr, fr), (hab, fr, to), (hab.transpose(0, 2, 1), to, fr), (hbb, to, to)):
        rows.append((3 * ri[:, None, None] + ii).ravel())
        cols.append((3 * ci[:, None, None] + jj).ravel())
        vals.append(blocks.ravel())
    H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(3 * n, 3 * n)).tocsc()
    g = np.zeros(3 * n)
    np.add.at(g, (3 * fr[:, None] + np.arange(3)).ravel(), ga.ravel())
    np.add.at(g, (3 * to[:, None] + np.arange(3)).ravel(), gb.ravel())
    return H, g


def optimize(graph, max_iters=100, tol=1e-9):
    """Levenberg-Marquardt with the anchor vertex fixed; returns ``(new_graph, stats)``.

    Damping starts at 1e-4 and is scaled by 10 down on an accepted step and up
    on a rejected one. The input graph is not modified.
    """
    if len(graph) == 0:
        raise TooFewPoses("empty graph")
    if not is_connected(graph):
        raise Disconnected("pose graph is not connected")
    for e in graph.edges:
        _check_information(e.information)

    vertices = graph.vertices.copy()
    f0 = objective(graph, vertices)
    history = [f0]
    if not graph.edges or f0 == 0.0:
        return PoseGraph(vertices, list(graph.edges), graph.anchor), OptimizeStats(0, f0, f0, history, True)

    fr, to, meas, info = _edge_arrays(graph)
    n = len(vertices)
    free = np.ones(3 * n, dtype=bool)
    free[3 * graph.anchor:3 * graph.anchor + 3] = False
    lam = LAMBDA_INIT
    f = f0
    iters = 0
    converged = False
    H = g = None
    while iters < max_iters:
        if H is None:
            H, g = _normal_equations(graph, vertices, fr, to, meas, info)
            Hf = H[free][:, free]
            gf = g[free]
            diag = Hf.diagonal()
        iters += 1
        A = Hf + sp.diags(lam * np.maximum(diag, 1e-12))
        try:
            step = spla.splu(A.tocsc()).solve(-gf)
            ok = np.all(np.isfinite(step))
        except RuntimeError:
            ok = False
        if not ok:
            lam *= 10.0
            if lam > LAMBDA_MAX:
                raise Diverged("normal equations could not be solved")
            continue
        if np.linalg.norm(step) <= 1e-12 * (np.linalg.norm(vertices) + 1e-12):
            converged = True
            break
        trial = vertices.copy()
        flat = trial.reshape(-1)
        flat[free] += step
        trial[:, 2] = normalize_angle(trial[:, 2])
        f_new = objective(graph, trial)
        if f_new <= f:
            decrease = (f - f_new) / f if f > 0 else 0.0
            vertices, f = trial, f_new
            history.append(f)
            lam = max(lam / 10.0, 1e-12)
            H = None
            if f == 0.0 or decrease < tol:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > LAMBDA_MAX:
                converged = True  # no descent direction left at any damping
                break
    # the anchor never moves: copy it back bit-for-bit
    vertices[graph.anchor] = graph.vertices[graph.anchor]
    return PoseGraph(vertices, list(graph.edges), graph.anchor), OptimizeStats(iters, f0, f, history, converged)


def to_matrix(pose, z=0.0):
    """Lift a planar pose to a 4x4 rigid transform (yaw about +z)."""
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    T = np.eye(4)
    T[:2, :2] = [[c, -s], [s, c]]
    T[:3, 3] = (pose.x, pose.y, z)
    return T


def from_matrix(T):
    """Planar part of a rigid transform: (t_x, t_y) and yaw about +z."""
    T = np.asarray(T, dtype=float)
    return PoseSE2(T[0, 3], T[1, 3], math.atan2(T[1, 0], T[0, 0]))
