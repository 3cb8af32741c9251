"""Three-level assignment/pooling classifier over patch graphs.

A patient graph is mapped to soft assignments of patches to local phenotypes
(row-wise MLP), to spatial neighborhoods (message-passing GNN + linear head),
and of neighborhoods to interaction areas (GNN on the pooled neighborhood
graph). Max-sum pooling turns the assignments into an abundance vector that a
single linear layer classifies. Training minimizes cross-entropy plus
entropy/orthogonality regularizers that keep assignments sharp without
collapsing onto a single element.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import PatchGraph, augment_graph
from .nn import Adam, TrainingDiverged, kaiming, zeros
from . import io as tio


@dataclass
class ModelConfig:
    """Hyperparameters of the assignment classifier.

    lambdas order: (patch-entropy P/N/A, collapse P/N/A).
    """
    phenotypes: int = 10
    neighborhoods: int = 9
    areas: int = 8
    hidden: int = 64
    hops: int = 2
    activation: str = "softmax"          # softmax | sigmoid (pooling only)
    use_max: bool = True
    gnn_variant: str = "plain"           # plain | residual
    use_glore: bool = False
    glore_nodes: int = 8
    lambdas: tuple = (0.1, 0.1, 0.1, 0.1, 0.1, 0.1)
    collapse: str = "patient_entropy"    # patient_entropy | orthogonal
    rho: float = 0.0
    aug_modes: tuple = ()
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    classes: int = 2
    normalize_adjacency: bool = True     # False = bare edge-sum aggregation

    def __post_init__(self):
        if min(self.phenotypes, self.neighborhoods) < 2 or self.areas < 2:
            raise ValueError("P, N, A must all be >= 2")
        if self.hidden < 1 or self.hops < 1:
            raise ValueError("hidden width and hop count must be >= 1")
        if any(l < 0 for l in self.lambdas) or len(self.lambdas) != 6:
            raise ValueError("lambdas must be 6 non-negative values")
        if self.activation not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.gnn_variant not in ("plain", "residual"):
            raise ValueError(f"unknown gnn variant {self.gnn_variant!r}")
        if self.collapse not in ("patient_entropy", "orthogonal"):
            raise ValueError(f"unknown collapse regularizer {self.collapse!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        d["aug_modes"] = list(self.aug_modes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["lambdas"] = tuple(d.get("lambdas", (0.1,) * 6))
        d["aug_modes"] = tuple(d.get("aug_modes", ()))
        return cls(**d)


@dataclass
class LossBreakdown:
    ce: float = 0.0
    entropy_p: float = 0.0
    entropy_n: float = 0.0
    entropy_a: float = 0.0
    collapse: float = 0.0
    total: float = 0.0

    def accumulate(self, other: "LossBreakdown"):
        self.ce += other.ce
        self.entropy_p += other.entropy_p
        self.entropy_n += other.entropy_n
        self.entropy_a += other.entropy_a
        self.collapse += other.collapse
        self.total += other.total


@dataclass
class ForwardResult:
    s_p: Tensor        # L x P logits
    s_n: Tensor        # L x N logits
    s_a: Tensor        # N x A logits
    z_hops: Tensor     # L x H final GNN embeddings
    abundance_p: Tensor
    abundance_n: Tensor
    abundance_a: Tensor
    abundance: Tensor  # concatenated (1 x T)
    logits: Tensor     # 1 x O


# -- individual operations -------------------------------------------------------

def glore(z: Tensor, wb: Tensor, wg: Tensor, wp: Tensor) -> Tensor:
    """Global reasoning: soft-assign patches to a few global nodes, exchange
    information on their fully-connected graph, project back, residual add.

    With the projection-back weight at zero this is the identity.
    """
    b = ad.softmax(z @ wb, axis=1)                       # L x m
    mass = ad.sum_(b, axis=0, keepdims=True)             # 1 x m
    g = (b.T @ z) / (mass.T + 1e-12)                     # m x g, mass-normalized
    mixed = ad.mean_(g, axis=0, keepdims=True)           # global exchange
    g2 = ad.relu(mixed @ wg + g)
    return z + (b @ g2) @ wp


def mlp_skip_forward(z: Tensor, params: dict, prefix: str) -> Tensor:
    """8-layer row-wise MLP, additive skip every 2 layers: stem, three
    2-layer residual blocks, linear head."""
    x = ad.relu(z @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    for blk in range(3):
        i = 2 + 2 * blk
        h = ad.relu(x @ params[f"{prefix}.w{i}"] + params[f"{prefix}.b{i}"])
        x = ad.relu(h @ params[f"{prefix}.w{i + 1}"] + params[f"{prefix}.b{i + 1}"] + x)
    return x @ params[f"{prefix}.w8"] + params[f"{prefix}.b8"]


def gnn_forward(z: Tensor, edges: np.ndarray, weights: Sequence[Tensor],
                variant: str = "plain", normalize: bool = True) -> Tensor:
    """K hops of Z <- relu(aggregate(Z) @ W); aggregation gathers incoming
    edges with a self term and mean normalization (or the bare edge sum).
    The residual variant adds the previous embeddings before the ReLU
    whenever shapes line up."""
    src = edges[:, 0] if edges.size else np.zeros(0, dtype=np.int64)
    dst = edges[:, 1] if edges.size else np.zeros(0, dtype=np.int64)
    L = z.shape[0]
    x = z
    for w in weights:
        agg = ad.edge_mean_aggregate(x, src, dst, L, normalize=normalize)
        pre = agg @ w
        if variant == "residual" and pre.shape == x.shape:
            pre = pre + x
        x = ad.relu(pre)
    return x


def dense_gnn_forward(x: Tensor, adj: Tensor, weights: Sequence[Tensor],
                      variant: str = "plain", normalize: bool = True) -> Tensor:
    """Same hop rule on a dense weighted adjacency (the pooled graph)."""
    n = x.shape[0]
    for w in weights:
        if normalize:
            indeg = ad.sum_(adj, axis=0, keepdims=True)      # 1 x N (symmetric)
            agg = (adj.T @ x + x) / (indeg.T + 1.0)
        else:
            agg = adj.T @ x
        pre = agg @ w
        if variant == "residual" and pre.shape == x.shape:
            pre = pre + x
        x = ad.relu(pre)
    return x


def pool_abundance(s_logits: Tensor, activation: str = "softmax",
                   use_max: bool = True) -> Tensor:
    """Max-sum pooling: activate rows, optionally keep only each row's
    maximum, then column-sum into an abundance vector."""
    if activation == "softmax":
        act = ad.softmax(s_logits, axis=1)
    elif activation == "sigmoid":
        act = ad.sigmoid(s_logits)
    else:
        raise ValueError(f"unknown activation {activation!r}")
    if use_max:
        act = ad.keep_row_max(act)
    return ad.sum_(act, axis=0)


def patch_entropy_loss(s_logits: Tensor) -> Tensor:
    """Mean row entropy of softmax(S), normalized by log(columns) into [0, 1]."""
    cols = s_logits.shape[1]
    if cols < 2:
        raise ValueError("entropy needs at least 2 columns")
    p = ad.softmax(s_logits, axis=1)
    ent = -ad.sum_(p * ad.log(p, floor=1e-12), axis=1)
    return ad.mean_(ent) / np.log(cols)


def patient_entropy_loss(abundance: Tensor) -> Tensor:
    """sum(p log p) / log(dim) of the normalized abundance vector, in [-1, 0];
    zero marks total collapse onto one element."""
    total = ad.sum_(abundance)
    if float(total.numpy()) <= 0:
        raise ValueError("abundance must have positive mass")
    p = abundance / total
    dim = abundance.data.size
    return ad.sum_(p * ad.log(p, floor=1e-12)) / np.log(dim)


def orthogonal_loss(s: Tensor) -> Tensor:
    """|| S'S / ||S'S||_F  -  I/sqrt(k) ||_F ; zero for balanced one-hot
    assignments, positive whenever clusters collapse or skew."""
    k = s.shape[1]
    sts = s.T @ s
    fro = ad.sqrt(ad.sum_(sts * sts))
    if float(fro.numpy()) == 0.0:
        raise ValueError("zero assignment matrix")
    target = np.eye(k) / np.sqrt(k)
    diff = sts / fro - ad.constant(target)
    return ad.sqrt(ad.sum_(diff * diff))


def classify(abundance: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return abundance @ w + b


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    lse = ad.logsumexp(logits, axis=1)
    pos = ad.take_pairs(logits, np.array([0]), np.array([int(label)]))
    return ad.sum_(lse - pos)


# -- the model -------------------------------------------------------------------

class TmeModel:
    """Parameter container plus forward/loss passes for one configuration."""

    def __init__(self, cfg: ModelConfig, input_dim: int, rng: np.random.Generator):
        self.cfg = cfg
        self.input_dim = input_dim
        g, H = input_dim, cfg.hidden
        p: dict[str, Tensor] = {}
        if cfg.use_glore:
            m = cfg.glore_nodes
            p["glore.wb"] = kaiming(rng, g, (g, m))
            p["glore.wg"] = kaiming(rng, g, (g, g))
            p["glore.wp"] = zeros((g, g))
        dims = [g] + [H] * 7
        for i in range(1, 8):
            p[f"phen.w{i}"] = kaiming(rng, dims[i - 1], (dims[i - 1], H))
            p[f"phen.b{i}"] = zeros((H,))
        p["phen.w8"] = kaiming(rng, H, (H, cfg.phenotypes))
        p["phen.b8"] = zeros((cfg.phenotypes,))
        for k in range(cfg.hops):
            fan = g if k == 0 else H
            p[f"gnn.w{k}"] = kaiming(rng, fan, (fan, H))
        p["neigh.w"] = kaiming(rng, H, (H, cfg.neighborhoods))
        p["neigh.b"] = zeros((cfg.neighborhoods,))
        for k in range(cfg.hops):
            p[f"area.w{k}"] = kaiming(rng, H, (H, H))
        p["area.head_w"] = kaiming(rng, H, (H, cfg.areas))
        p["area.head_b"] = zeros((cfg.areas,))
        t = cfg.phenotypes + cfg.neighborhoods + cfg.areas
        p["clf.w"] = kaiming(rng, t, (t, cfg.classes))
        p["clf.b"] = zeros((cfg.classes,))
        self.params = p

    # forward --------------------------------------------------------------
    def forward(self, graph: PatchGraph) -> ForwardResult:
        cfg = self.cfg
        z = ad.constant(graph.z)
        if cfg.use_glore:
            z = glore(z, self.params["glore.wb"], self.params["glore.wg"],
                      self.params["glore.wp"])
        s_p = mlp_skip_forward(z, self.params, "phen")
        gnn_w = [self.params[f"gnn.w{k}"] for k in range(cfg.hops)]
        zk = gnn_forward(z, graph.edges, gnn_w, cfg.gnn_variant,
                         cfg.normalize_adjacency)
        s_n = zk @ self.params["neigh.w"] + self.params["neigh.b"]

        s_n_prob = ad.softmax(s_n, axis=1)
        pooled_x = s_n_prob.T @ zk
        if graph.edges.size:
            src, dst = graph.edges[:, 0], graph.edges[:, 1]
            pooled_adj = ad.gather_rows(s_n_prob, src).T @ ad.gather_rows(s_n_prob, dst)
        else:
            n = cfg.neighborhoods
            pooled_adj = ad.constant(np.zeros((n, n)))
        area_w = [self.params[f"area.w{k}"] for k in range(cfg.hops)]
        ax = dense_gnn_forward(pooled_x, pooled_adj, area_w, cfg.gnn_variant,
                               cfg.normalize_adjacency)
        s_a = ax @ self.params["area.head_w"] + self.params["area.head_b"]

        ab_p = pool_abundance(s_p, cfg.activation, cfg.use_max)
        ab_n = pool_abundance(s_n, cfg.activation, cfg.use_max)
        ab_a = pool_abundance(s_a, cfg.activation, cfg.use_max)
        abundance = ad.concat([ab_p, ab_n, ab_a], axis=0).reshape(1, -1)
        logits = classify(abundance, self.params["clf.w"], self.params["clf.b"])
        return ForwardResult(s_p=s_p, s_n=s_n, s_a=s_a, z_hops=zk,
                             abundance_p=ab_p, abundance_n=ab_n, abundance_a=ab_a,
                             abundance=abundance, logits=logits)

    def loss(self, graph: PatchGraph, label: int):
        cfg = self.cfg
        out = self.forward(graph)
        ce = cross_entropy(out.logits, label)
        e_p = patch_entropy_loss(out.s_p)
        e_n = patch_entropy_loss(out.s_n)
        e_a = patch_entropy_loss(out.s_a)
        lam = cfg.lambdas
        entropy_term = (lam[0] * e_p + lam[1] * e_n + lam[2] * e_a) / 3.0
        if cfg.collapse == "patient_entropy":
            c_p = patient_entropy_loss(out.abundance_p)
            c_n = patient_entropy_loss(out.abundance_n)
            c_a = patient_entropy_loss(out.abundance_a)
            collapse_term = (lam[3] * c_p + lam[4] * c_n + lam[5] * c_a) / 3.0
        else:
            o_n = orthogonal_loss(ad.softmax(out.s_n, axis=1))
            o_a = orthogonal_loss(ad.softmax(out.s_a, axis=1))
            collapse_term = (lam[4] * o_n + lam[5] * o_a) / 2.0
        total = ce + entropy_term + collapse_term
        breakdown = LossBreakdown(ce=ce.item(), entropy_p=e_p.item(),
                                  entropy_n=e_n.item(), entropy_a=e_a.item(),
                                  collapse=collapse_term.item(), total=total.item())
        return total, breakdown, out

    def predict_proba(self, graph: PatchGraph) -> np.ndarray:
        out = self.forward(graph)
        return ad.softmax(out.logits, axis=1).numpy()[0]

    # persistence ----------------------------------------------------------
    def save(self, path, extra_header=None, label_names=None):
        header = {"config": self.cfg.to_dict(), "input_dim": self.input_dim,
                  "label_names": label_names}
        if extra_header:
            header.update(extra_header)
        tio.write_container(path, {k: v.data for k, v in self.params.items()},
                            header=header)
        return path

    @classmethod
    def load(cls, path):
        arrays, header = tio.read_container(path)
        cfg = ModelConfig.from_dict(header["config"])
        model = cls.__new__(cls)
        model.cfg = cfg
        model.input_dim = header["input_dim"]
        model.params = {k: ad.parameter(v.astype(np.float64)) for k, v in arrays.items()}
        return model, header


# -- training --------------------------------------------------------------------

def training_step(model: TmeModel, batch, optimizer: Adam,
                  rng: np.random.Generator, step_index: int = 0) -> LossBreakdown:
    """One gradient step over a batch of (graph, label) pairs; graphs are
    augmented per config, gradients accumulate one patient at a time."""
    cfg = model.cfg
    optimizer.zero_grad()
    agg = LossBreakdown()
    for graph, label in batch:
        if cfg.rho > 0 and cfg.aug_modes:
            graph = augment_graph(graph, cfg.rho, cfg.aug_modes, rng)
        total, breakdown, _ = model.loss(graph, label)
        if not np.isfinite(breakdown.total):
            raise TrainingDiverged(step_index, breakdown)
        total.backward()
        agg.accumulate(breakdown)
    optimizer.step()
    return agg


def train_model(graphs, labels, cfg: ModelConfig, seed: int,
                input_dim: int | None = None, log_rows: list | None = None,
                model: TmeModel | None = None, optimizer: Adam | None = None,
                epochs: int | None = None, start_epoch: int = 0):
    """Train (or resume) a model; returns (model, optimizer, log rows)."""
    if input_dim is None:
        input_dim = graphs[0].z.shape[1]
    rng = np.random.default_rng([seed, 0x7e57])
    if model is None:
        model = TmeModel(cfg, input_dim, np.random.default_rng([seed, 0x1417]))
    if optimizer is None:
        optimizer = Adam(model.params, lr=cfg.lr)
    n_epochs = cfg.epochs if epochs is None else epochs
    pairs = list(zip(graphs, labels))
    step = 0
    for epoch in range(start_epoch, n_epochs):
        order = rng.permutation(len(pairs))
        for lo in range(0, len(order), cfg.batch_size):
            batch = [pairs[i] for i in order[lo:lo + cfg.batch_size]]
            breakdown = training_step(model, batch, optimizer, rng, step)
            if log_rows is not None:
                log_rows.append((epoch, step, breakdown.total, breakdown.ce,
                                 breakdown.collapse))
            step += 1
    return model, optimizer


# -- evaluation ------------------------------------------------------------------

def accuracy_ci(correct: int, n: int, zscore: float = 1.96):
    """Normal-approximation 95% CI for a pooled accuracy."""
    if n == 0:
        return 0.0, (0.0, 0.0)
    p = correct / n
    half = zscore * np.sqrt(p * (1.0 - p) / n)
    return p, (max(0.0, p - half), min(1.0, p + half))


def stratified_folds(labels, folds: int, seed: int):
    """Deal each class round-robin into folds after a seeded shuffle."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 0xf01d])
    assignment = np.zeros(len(labels), dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        for pos, i in enumerate(idx):
            assignment[i] = pos % folds
    return assignment


@dataclass
class EvalResult:
    accuracy: float
    ci: tuple
    auc: float
    confusion: np.ndarray
    fold_accuracies: list = field(default_factory=list)
    predictions: list = field(default_factory=list)  # (id, true, probs...)


def _rank_auc(y_true, scores) -> float:
    """Rank-based (Mann-Whitney) AUC for binary labels."""
    from scipy.stats import rankdata
    y = np.asarray(y_true)
    s = np.asarray(scores, dtype=float)
    pos, neg = (y == 1).sum(), (y == 0).sum()
    if pos == 0 or neg == 0:
        return float("nan")
    ranks = rankdata(s)
    return (ranks[y == 1].sum() - pos * (pos + 1) / 2.0) / (pos * neg)


def macro_auc(y_true, probs) -> float:
    """Binary AUC on class-1 scores, macro one-vs-rest otherwise."""
    probs = np.asarray(probs)
    y = np.asarray(y_true)
    classes = probs.shape[1]
    if classes == 2:
        return _rank_auc((y == 1).astype(int), probs[:, 1])
    vals = []
    for c in range(classes):
        mask = (y == c).astype(int)
        if 0 < mask.sum() < len(mask):
            vals.append(_rank_auc(mask, probs[:, c]))
    return float(np.mean(vals)) if vals else float("nan")


def cross_validate(graphs, cfg: ModelConfig, folds: int = 10, seed: int = 0,
                   return_models: bool = False):
    """Stratified k-fold over patients; pooled accuracy with a normal 95% CI."""
    labels = np.asarray([g.label for g in graphs], dtype=np.int64)
    counts = np.bincount(labels)
    if (counts[counts > 0] < folds).any():
        raise ValueError(f"need >= {folds} patients per class, got {counts.tolist()}")
    fold_of = stratified_folds(labels, folds, seed)
    predictions = []
    fold_accs = []
    models = []
    for f in range(folds):
        train_idx = np.flatnonzero(fold_of != f)
        test_idx = np.flatnonzero(fold_of == f)
        train_labels = labels[train_idx]
        if np.unique(train_labels).size != np.unique(labels).size:
            raise ValueError(f"class absent from training split of fold {f}")
        model, _ = train_model([graphs[i] for i in train_idx], train_labels,
                               cfg, seed=seed * 1000 + f)
        hits = 0
        for i in test_idx:
            probs = model.predict_proba(graphs[i])
            predictions.append((graphs[i].patient_id, int(labels[i]), probs))
            hits += int(np.argmax(probs) == labels[i])
        fold_accs.append(hits / max(1, len(test_idx)))
        if return_models:
            models.append(model)
    y_true = np.array([p[1] for p in predictions])
    probs = np.array([p[2] for p in predictions])
    y_pred = probs.argmax(axis=1)
    acc, ci = accuracy_ci(int((y_pred == y_true).sum()), len(y_true))
    n_cls = probs.shape[1]
    confusion = np.zeros((n_cls, n_cls), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        confusion[t, p] += 1
    result = EvalResult(accuracy=acc, ci=ci, auc=macro_auc(y_true, probs),
                        confusion=confusion, fold_accuracies=fold_accs,
                        predictions=predictions)
    return (result, models) if return_models else result


def leave_one_patient_out(graphs, cfg: ModelConfig, seed: int = 0):
    """Hold out all images of one patient at a time; the patient prediction
    is the mean of its image-level class probabilities."""
    by_patient: dict[str, list[PatchGraph]] = {}
    for g in graphs:
        by_patient.setdefault(g.patient_id, []).append(g)
    if len(by_patient) < 3:
        raise ValueError("leave-one-patient-out needs at least 3 patients")
    pids = sorted(by_patient)
    predictions = []
    for k, pid in enumerate(pids):
        train_graphs = [g for q in pids if q != pid for g in by_patient[q]]
        train_labels = [g.label for g in train_graphs]
        model, _ = train_model(train_graphs, train_labels, cfg, seed=seed * 1000 + k)
        probs = np.mean([model.predict_proba(g) for g in by_patient[pid]], axis=0)
        predictions.append((pid, int(by_patient[pid][0].label), probs))
    y_true = np.array([p[1] for p in predictions])
    probs = np.array([p[2] for p in predictions])
    y_pred = probs.argmax(axis=1)
    acc, ci = accuracy_ci(int((y_pred == y_true).sum()), len(y_true))
    n_cls = probs.shape[1]
    confusion = np.zeros((n_cls, n_cls), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        confusion[t, p] += 1
    return EvalResult(accuracy=acc, ci=ci, auc=macro_auc(y_true, probs),
                      confusion=confusion, predictions=predictions)
