"""The persistent map: camera and object pose nodes joined by relative
SE(3) measurements with ICP-derived information matrices, optimised by
robustified Levenberg-Marquardt on the manifold."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (Pose, adjoint, quat_from_rotation, rotation_from_quat,
                       se3_exp, se3_log, se3_right_jacobian_inv)

HUBER_DELTA = 1.0
LM_INITIAL_LAMBDA = 1e-4
LM_MAX_ITERATIONS = 100
LM_ERROR_DECREASE = 1e-9
LM_STEP_NORM = 1e-10
MIN_EDGE_RESIDUALS = 6
EDGE_CONDITION_LIMIT = 1e8

CAMERA = "camera"
OBJECT = "object"


@dataclass
class GraphNode:
    key: tuple           # (kind, index)
    state: Pose
    fixed: bool = False

    @property
    def kind(self) -> str:
        return self.key[0]


@dataclass
class GraphEdge:
    """Relative measurement from node `a` to node `b`: ideally
    state_a^-1 * state_b equals the measurement."""

    a: tuple
    b: tuple
    measurement: Pose
    information: np.ndarray


class PoseGraph:
    def __init__(self):
        self.nodes: dict[tuple, GraphNode] = {}
        self.edges: list[GraphEdge] = []

    def add_camera_node(self, index: int, pose: Pose) -> tuple:
        """The first camera node is fixed and pins the gauge."""
        key = (CAMERA, int(index))
        if key in self.nodes:
            raise ValueError(f"duplicate node {key}")
        fixed = not any(n.fixed for n in self.nodes.values())
        self.nodes[key] = GraphNode(key=key, state=pose, fixed=fixed)
        return key

    def add_object_node(self, index: int, pose: Pose) -> tuple:
        key = (OBJECT, int(index))
        if key in self.nodes:
            raise ValueError(f"duplicate node {key}")
        self.nodes[key] = GraphNode(key=key, state=pose)
        return key

    def add_edge(self, a: tuple, b: tuple, measurement: Pose, information) -> GraphEdge:
        if a not in self.nodes or b not in self.nodes:
            raise KeyError(f"edge references missing node: {a} -> {b}")
        info = np.asarray(information, dtype=np.float64)
        eig = np.linalg.eigvalsh(0.5 * (info + info.T))
        if eig[0] < -1e-9 * max(abs(eig[-1]), 1.0):
            raise ValueError("edge information matrix must be positive semi-definite")
        edge = GraphEdge(a=a, b=b, measurement=measurement, information=info)
        self.edges.append(edge)
        return edge

    def remove_object(self, index: int):
        key = (OBJECT, int(index))
        if key not in self.nodes:
            raise KeyError(key)
        del self.nodes[key]
        self.edges = [e for e in self.edges if e.a != key and e.b != key]

    def camera_keys(self):
        return [k for k in self.nodes if k[0] == CAMERA]

    def object_keys(self):
        return [k for k in self.nodes if k[0] == OBJECT]

    def edges_of(self, key: tuple):
        return [e for e in self.edges if e.a == key or e.b == key]


def make_virtual_measurement(jtj, jtr, camera_pose: Pose, target_pose: Pose,
                             count: int = MIN_EDGE_RESIDUALS,
                             condition_limit=EDGE_CONDITION_LIMIT):
    """One extra Gauss-Newton step on a partitioned ICP system gives the
    relative-pose measurement between the target frame and the refined
    camera; the ICP information is transported to the edge's
    right-multiplicative parameterisation by the camera-pose adjoint.

    Returns (measurement, information) or None for a degenerate system.
    """
    jtj = np.asarray(jtj, dtype=np.float64)
    jtr = np.asarray(jtr, dtype=np.float64)
    if count < MIN_EDGE_RESIDUALS:
        return None
    eig = np.linalg.eigvalsh(jtj)
    if eig[0] <= 0 or eig[-1] / eig[0] > condition_limit:
        return None
    step = np.linalg.solve(jtj, -jtr)
    refined = se3_exp(step) @ camera_pose
    measurement = target_pose.inverse() @ refined
    adj = adjoint(camera_pose)
    information = adj.T @ jtj @ adj
    return measurement, 0.5 * (information + information.T)


def edge_error(graph: PoseGraph, edge: GraphEdge):
    """Right-convention residual log(meas^-1 * state_a^-1 * state_b)."""
    a = graph.nodes[edge.a].state
    b = graph.nodes[edge.b].state
    return se3_log(edge.measurement.inverse() @ a.inverse() @ b)


def huber(s, delta=HUBER_DELTA):
    """Robust cost of a squared Mahalanobis error."""
    d2 = delta * delta
    return s if s <= d2 else 2.0 * delta * np.sqrt(s) - d2


def huber_weight(s, delta=HUBER_DELTA):
    """d huber / d s, the IRLS weight."""
    d2 = delta * delta
    return 1.0 if s <= d2 else delta / np.sqrt(s)


def total_robust_error(graph: PoseGraph, delta=HUBER_DELTA) -> float:
    total = 0.0
    for edge in graph.edges:
        e = edge_error(graph, edge)
        total += huber(float(e @ edge.information @ e), delta)
    return total


def connected_to_fixed(graph: PoseGraph):
    """Set of node keys reachable from the fixed node."""
    fixed = [k for k, n in graph.nodes.items() if n.fixed]
    if not fixed:
        return set()
    adjacency: dict[tuple, list] = {k: [] for k in graph.nodes}
    for e in graph.edges:
        adjacency[e.a].append(e.b)
        adjacency[e.b].append(e.a)
    seen = set(fixed)
    queue = list(fixed)
    while queue:
        k = queue.pop()
        for other in adjacency[k]:
            if other not in seen:
                seen.add(other)
                queue.append(other)
    return seen


@dataclass
class OptimizeReport:
    initial_error: float
    final_error: float
    iterations: int
    disconnected: list = field(default_factory=list)
    converged: bool = True


def optimize(graph: PoseGraph,
             max_iterations=LM_MAX_ITERATIONS,
             initial_lambda=LM_INITIAL_LAMBDA,
             huber_delta=HUBER_DELTA) -> OptimizeReport:
    """Levenberg-Marquardt over all nodes connected to the fixed node,
    right-multiplicative perturbations, Huber-robustified edge errors.
    Disconnected nodes are reported and left untouched; steps are accepted
    only when the total robust error decreases."""
    component = connected_to_fixed(graph)
    disconnected = sorted(k for k in graph.nodes if k not in component)
    free = [k for k in sorted(component) if not graph.nodes[k].fixed]
    index = {k: i for i, k in enumerate(free)}
    active = [e for e in graph.edges if e.a in component and e.b in component]

    if not free or not active:
        err = total_robust_error(graph, huber_delta)
        return OptimizeReport(err, err, 0, disconnected)

    n = 6 * len(free)
    lam = initial_lambda
    current = total_robust_error(graph, huber_delta)
    initial = current
    iterations = 0

    for iterations in range(1, max_iterations + 1):
        H = np.zeros((n, n))
        b = np.zeros(n)
        for edge in active:
            e = edge_error(graph, edge)
            info = edge.information
            s = float(e @ info @ e)
            w = huber_weight(s, huber_delta)
            jr_inv = se3_right_jacobian_inv(e)
            blocks = []
            if not graph.nodes[edge.b].fixed:
                blocks.append((index[edge.b], jr_inv))
            if not graph.nodes[edge.a].fixed:
                rel = graph.nodes[edge.a].state.inverse() @ graph.nodes[edge.b].state
                blocks.append((index[edge.a], -jr_inv @ adjoint(rel.inverse())))
            winfo = w * info
            for i, ji in blocks:
                b[6 * i:6 * i + 6] -= ji.T @ winfo @ e
                for j, jj in blocks:
                    H[6 * i:6 * i + 6, 6 * j:6 * j + 6] += ji.T @ winfo @ jj

        damped = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
        try:
            step = np.linalg.solve(damped, b)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue

        saved = {k: graph.nodes[k].state for k in free}
        for k in free:
            i = index[k]
            graph.nodes[k].state = saved[k] @ se3_exp(step[6 * i:6 * i + 6])
        attempt = total_robust_error(graph, huber_delta)

        if attempt < current:
            decrease = current - attempt
            current = attempt
            lam *= 0.5
            if decrease < LM_ERROR_DECREASE * max(current, 1.0):
                break
            if np.linalg.norm(step) < LM_STEP_NORM:
                break
        else:
            for k in free:
                graph.nodes[k].state = saved[k]
            lam *= 10.0
            if np.linalg.norm(step) < LM_STEP_NORM:
                break

    return OptimizeReport(initial, current, iterations, disconnected)


def recentre_object(graph: PoseGraph, index: int, frame_change: Pose):
    """Apply a volume recentring T mapping old-frame to new-frame points:
    the node state becomes state * T^-1 and every measurement on edges
    leaving the object becomes T * measurement, which leaves all edge
    errors unchanged."""
    key = (OBJECT, int(index))
    if key not in graph.nodes:
        raise KeyError(key)
    graph.nodes[key].state = graph.nodes[key].state @ frame_change.inverse()
    for edge in graph.edges:
        if edge.a == key:
            edge.measurement = frame_change @ edge.measurement
        elif edge.b == key:
            # edges are built object -> camera; an incoming edge would need
            # its information transported as well
            raise ValueError("recentring expects edges to leave the object node")


# ---------------------------------------------------------------------------
# line-oriented dump: VERTEX kind index fixed tx ty tz qx qy qz qw
#                     EDGE kind_a idx_a kind_b idx_b <7 pose> <21 info upper>

def save_graph(graph: PoseGraph, path):
    with open(path, "w") as f:
        for key in sorted(graph.nodes):
            node = graph.nodes[key]
            t = [float(x) for x in node.state.translation]
            q = [float(x) for x in quat_from_rotation(node.state.rotation)]
            vals = " ".join(repr(x) for x in t + q)
            f.write(f"VERTEX {key[0]} {key[1]} {int(node.fixed)} {vals}\n")
        for e in graph.edges:
            t = [float(x) for x in e.measurement.translation]
            q = [float(x) for x in quat_from_rotation(e.measurement.rotation)]
            upper = [float(e.information[i, j]) for i in range(6) for j in range(i, 6)]
            vals = " ".join(repr(x) for x in t + q + upper)
            f.write(f"EDGE {e.a[0]} {e.a[1]} {e.b[0]} {e.b[1]} {vals}\n")


def load_graph(path) -> PoseGraph:
    graph = PoseGraph()
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "VERTEX":
                kind, idx, fixed = parts[1], int(parts[2]), bool(int(parts[3]))
                vals = [float(x) for x in parts[4:]]
                pose = Pose(rotation_from_quat(vals[3:7]), vals[:3])
                key = (kind, idx)
                graph.nodes[key] = GraphNode(key=key, state=pose, fixed=fixed)
            elif parts[0] == "EDGE":
                a = (parts[1], int(parts[2]))
                b = (parts[3], int(parts[4]))
                vals = [float(x) for x in parts[5:]]
                meas = Pose(rotation_from_quat(vals[3:7]), vals[:3])
                info = np.zeros((6, 6))
                k = 7
                for i in range(6):
                    for j in range(i, 6):
                        info[i, j] = info[j, i] = vals[k]
                        k += 1
                graph.edges.append(GraphEdge(a=a, b=b, measurement=meas,
                                             information=info))
    return graph
