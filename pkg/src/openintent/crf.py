"""Linear-chain CRF: exact likelihood, Viterbi, and constrained decoding.

Decoding constraints come in two flavors: pair existence (an ACTION tag in a
sequence requires an OBJECT tag and vice versa) and indicator windows (a short
token window following an intent-indicator phrase must contain an ACTION).
Two constrained decoders are provided: a penalized beam search and an exact
search over the decoding lattice.

The exact decoder solves the integer program one would write over the lattice
(binary edge indicators x_e maximizing sum(w_e * x_e) subject to unit
source/sink flow, flow conservation at every (position, label) node,
sum(action-node indicators) >= 1 iff sum(object-node indicators) >= 1 both ways
as linear implications through 0/1 usage variables, and
sum(action nodes inside window) >= 1 per indicator window). It is implemented
as branch-and-bound with Viterbi-suffix upper bounds, which reaches the same
optimum without an external solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn

from .corpus import TagLabel

# Ranking demotion applied to beam hypotheses that have violated a constraint.
BEAM_PENALTY = -1e4
DEFAULT_BEAM_WIDTH = 8
DEFAULT_WINDOW_LEN = 5
MAX_EXACT_LENGTH = 512


@dataclass(frozen=True)
class LabelScheme:
    """Names the decoder's label inventory and which ids count as action/object."""

    labels: tuple[str, ...]
    action_ids: frozenset[int]
    object_ids: frozenset[int]

    @property
    def size(self) -> int:
        return len(self.labels)


RAW_SCHEME = LabelScheme(
    labels=tuple(l.name for l in TagLabel),
    action_ids=frozenset({TagLabel.ACTION.value}),
    object_ids=frozenset({TagLabel.OBJECT.value}),
)

BIO_LABELS = ("B-ACTION", "I-ACTION", "B-OBJECT", "I-OBJECT", "B-NONE", "I-NONE")
BIO_SCHEME = LabelScheme(
    labels=BIO_LABELS,
    action_ids=frozenset({0, 1}),
    object_ids=frozenset({2, 3}),
)


@dataclass(frozen=True)
class ConstraintSet:
    """Global decoding constraints for one sequence.

    ``indicator_windows`` holds (start, length) pairs in token positions; the
    window [start, start+length) must contain at least one ACTION tag.
    Windows reaching past the end of the sequence are clipped; windows that
    clip to nothing are dropped.
    """

    pair_existence: bool = True
    indicator_windows: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "indicator_windows", tuple(tuple(w) for w in self.indicator_windows))

    def clipped_windows(self, n: int) -> list[tuple[int, int]]:
        out = []
        for start, length in self.indicator_windows:
            end = min(start + length, n)
            if 0 <= start < end:
                out.append((start, end))
        return sorted(set(out))

    @property
    def empty(self) -> bool:
        return not self.pair_existence and not self.indicator_windows


def windows_from_matches(matches: Sequence[tuple[int, int]], window_len: int = DEFAULT_WINDOW_LEN) -> tuple[tuple[int, int], ...]:
    """Indicator windows starting right after each (start, end) phrase match."""
    return tuple((end, window_len) for _, end in matches)


def satisfies(label_ids: Sequence[int], constraints: ConstraintSet, scheme: LabelScheme = RAW_SCHEME) -> bool:
    n = len(label_ids)
    if constraints.pair_existence:
        has_action = any(y in scheme.action_ids for y in label_ids)
        has_object = any(y in scheme.object_ids for y in label_ids)
        if has_action != has_object:
            return False
    for start, end in constraints.clipped_windows(n):
        if not any(label_ids[i] in scheme.action_ids for i in range(start, end)):
            return False
    return True


class LinearChainCRF(nn.Module):
    """Emission projection plus transition scores over label pairs.

    The score of a labeling is
    start[y_1] + sum_i emission_i[y_i] + sum_i T[y_{i-1}, y_i] + stop[y_n],
    and P(y | z) normalizes exp(score) over all label sequences.
    """

    def __init__(self, input_dim: int, num_labels: int = len(TagLabel)):
        super().__init__()
        if num_labels < 2:
            raise ValueError("need at least two labels")
        self.num_labels = num_labels
        self.emission = nn.Linear(input_dim, num_labels)
        self.transitions = nn.Parameter(torch.empty(num_labels, num_labels))
        self.start_transitions = nn.Parameter(torch.empty(num_labels))
        self.stop_transitions = nn.Parameter(torch.empty(num_labels))
        nn.init.uniform_(self.transitions, -0.1, 0.1)
        nn.init.uniform_(self.start_transitions, -0.1, 0.1)
        nn.init.uniform_(self.stop_transitions, -0.1, 0.1)

    def emissions(self, z: torch.Tensor) -> torch.Tensor:
        return self.emission(z)

    def sequence_score(self, emissions: torch.Tensor, label_ids: Sequence[int]) -> torch.Tensor:
        """Unnormalized score of one labeling; emissions (n, m)."""
        ids = list(label_ids)
        score = self.start_transitions[ids[0]] + emissions[0, ids[0]]
        for i in range(1, len(ids)):
            score = score + self.transitions[ids[i - 1], ids[i]] + emissions[i, ids[i]]
        return score + self.stop_transitions[ids[-1]]

    def log_partition(self, emissions: torch.Tensor) -> torch.Tensor:
        """log sum over all labelings of exp(score), forward algorithm in log space."""
        alpha = self.start_transitions + emissions[0]
        for i in range(1, emissions.shape[0]):
            alpha = torch.logsumexp(alpha.unsqueeze(1) + self.transitions, dim=0) + emissions[i]
        return torch.logsumexp(alpha + self.stop_transitions, dim=0)

    def log_likelihood(self, z: torch.Tensor, tags: Sequence[TagLabel] | Sequence[int]) -> torch.Tensor:
        """log P(tags | z) for a single sequence; z has shape (n, input_dim)."""
        ids = [t.value if isinstance(t, TagLabel) else int(t) for t in tags]
        if z.dim() != 2 or z.shape[0] == 0:
            raise ValueError("z must be a non-empty (n, input_dim) tensor")
        if z.shape[0] != len(ids):
            raise ValueError(f"{z.shape[0]} inputs vs {len(ids)} tags")
        emissions = self.emissions(z)
        return self.sequence_score(emissions, ids) - self.log_partition(emissions)

    def nll(self, emissions: torch.Tensor, tags: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Mean negative log-likelihood over a batch; emissions (B, T, m)."""
        b, t, m = emissions.shape
        fmask = mask.to(emissions.dtype)
        # Numerator: score of the gold paths.
        score = self.start_transitions[tags[:, 0]] + emissions[:, 0].gather(1, tags[:, 0:1]).squeeze(1)
        for i in range(1, t):
            step = (
                self.transitions[tags[:, i - 1], tags[:, i]]
                + emissions[:, i].gather(1, tags[:, i : i + 1]).squeeze(1)
            )
            score = score + step * fmask[:, i]
        last = (mask.long().sum(dim=1) - 1).clamp(min=0)
        score = score + self.stop_transitions[tags.gather(1, last.unsqueeze(1)).squeeze(1)]
        # Denominator: forward algorithm with per-position masking.
        alpha = self.start_transitions.unsqueeze(0) + emissions[:, 0]
        for i in range(1, t):
            nxt = torch.logsumexp(alpha.unsqueeze(2) + self.transitions.unsqueeze(0), dim=1) + emissions[:, i]
            keep = fmask[:, i].unsqueeze(1)
            alpha = keep * nxt + (1.0 - keep) * alpha
        log_z = torch.logsumexp(alpha + self.stop_transitions.unsqueeze(0), dim=1)
        return (log_z - score).mean()


def log_likelihood(z: torch.Tensor, tags, crf: LinearChainCRF) -> torch.Tensor:
    return crf.log_likelihood(z, tags)


def _potentials(z: torch.Tensor, crf: LinearChainCRF):
    """Detached float64 (emissions, transitions, start, stop) for decoding."""
    with torch.no_grad():
        em = crf.emissions(z.detach()).double().cpu().numpy()
        trans = crf.transitions.detach().double().cpu().numpy()
        start = crf.start_transitions.detach().double().cpu().numpy()
        stop = crf.stop_transitions.detach().double().cpu().numpy()
    return em, trans, start, stop


def _viterbi_ids(em: np.ndarray, trans: np.ndarray, start: np.ndarray, stop: np.ndarray) -> list[int]:
    n, m = em.shape
    score = start + em[0]
    back = np.zeros((n, m), dtype=np.int64)
    for i in range(1, n):
        total = score[:, None] + trans + em[i][None, :]
        back[i] = np.argmax(total, axis=0)  # first max wins: deterministic tie-break
        score = total[back[i], np.arange(m)]
    score = score + stop
    best = [int(np.argmax(score))]
    for i in range(n - 1, 0, -1):
        best.append(int(back[i, best[-1]]))
    best.reverse()
    return best


def _ids_to_labels(ids: Sequence[int]) -> list[TagLabel]:
    return [TagLabel(i) for i in ids]


def viterbi(z: torch.Tensor, crf: LinearChainCRF) -> list[TagLabel]:
    """Most-probable label sequence; ties resolve toward smaller label ids."""
    if z.shape[0] == 0:
        return []
    em, trans, start, stop = _potentials(z, crf)
    return _ids_to_labels(_viterbi_ids(em, trans, start, stop))


def viterbi_ids(z: torch.Tensor, crf: LinearChainCRF) -> list[int]:
    if z.shape[0] == 0:
        return []
    em, trans, start, stop = _potentials(z, crf)
    return _viterbi_ids(em, trans, start, stop)


class BeamResult(NamedTuple):
    tags: list[TagLabel]
    label_ids: list[int]
    feasible: bool


class _Hyp(NamedTuple):
    score: float
    violations: int
    labels: tuple[int, ...]
    has_action: bool
    has_object: bool
    window_hits: tuple[bool, ...]


def beam_decode_constrained(
    z: torch.Tensor,
    crf: LinearChainCRF,
    constraints: ConstraintSet,
    beam_width: int = DEFAULT_BEAM_WIDTH,
    scheme: LabelScheme = RAW_SCHEME,
) -> BeamResult:
    """Beam search that demotes, but keeps, constraint-violating hypotheses.

    A hypothesis collects one violation per indicator window that closes
    without an ACTION inside, plus one if the finished sequence breaks pair
    existence. Ranking uses score + BEAM_PENALTY * violations; the returned
    sequence is the best survivor with zero violations. If no survivor is
    clean the fallback is all-NONE with ``feasible=False``.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be at least 1")
    n = z.shape[0]
    if n == 0:
        return BeamResult([], [], True)
    em, trans, start, stop = _potentials(z, crf)
    m = em.shape[1]
    windows = constraints.clipped_windows(n)

    def rank(h: _Hyp) -> tuple:
        return (-(h.score + BEAM_PENALTY * h.violations), h.labels)

    beam: list[_Hyp] = []
    for y in range(m):
        h = _Hyp(
            score=float(start[y] + em[0, y]),
            violations=0,
            labels=(y,),
            has_action=y in scheme.action_ids,
            has_object=y in scheme.object_ids,
            window_hits=tuple(s <= 0 < e and y in scheme.action_ids for s, e in windows),
        )
        beam.append(_close_windows(h, 1, windows))
    beam = sorted(beam, key=rank)[:beam_width]

    for i in range(1, n):
        grown: list[_Hyp] = []
        for h in beam:
            prev = h.labels[-1]
            for y in range(m):
                hits = tuple(
                    hit or (s <= i < e and y in scheme.action_ids)
                    for hit, (s, e) in zip(h.window_hits, windows)
                )
                nh = _Hyp(
                    score=h.score + float(trans[prev, y] + em[i, y]),
                    violations=h.violations,
                    labels=h.labels + (y,),
                    has_action=h.has_action or y in scheme.action_ids,
                    has_object=h.has_object or y in scheme.object_ids,
                    window_hits=hits,
                )
                grown.append(_close_windows(nh, i + 1, windows))
        beam = sorted(grown, key=rank)[:beam_width]

    finals: list[_Hyp] = []
    for h in beam:
        score = h.score + float(stop[h.labels[-1]])
        violations = h.violations
        if constraints.pair_existence and h.has_action != h.has_object:
            violations += 1
        finals.append(h._replace(score=score, violations=violations))
    finals.sort(key=rank)
    for h in finals:
        if h.violations == 0:
            ids = list(h.labels)
            return BeamResult(labels_for_scheme(ids, scheme), ids, True)
    ids = all_none_ids(n, scheme)
    return BeamResult(labels_for_scheme(ids, scheme), ids, False)


def _close_windows(h: _Hyp, boundary: int, windows: list[tuple[int, int]]) -> _Hyp:
    """Add a violation for each window whose end was just crossed unsatisfied."""
    violations = h.violations
    for hit, (s, e) in zip(h.window_hits, windows):
        if e == boundary and not hit:
            violations += 1
    if violations == h.violations:
        return h
    return h._replace(violations=violations)


def all_none_ids(n: int, scheme: LabelScheme = RAW_SCHEME) -> list[int]:
    """Label ids of the all-NONE sequence under the given scheme."""
    if scheme is BIO_SCHEME:
        index = {name: i for i, name in enumerate(BIO_LABELS)}
        return [index["B-NONE"]] + [index["I-NONE"]] * (n - 1) if n else []
    return [TagLabel.NONE.value] * n


def labels_for_scheme(ids: Sequence[int], scheme: LabelScheme = RAW_SCHEME) -> list[TagLabel]:
    """Collapse decoder label ids to the three raw labels."""
    if scheme is BIO_SCHEME:
        return bio_ids_to_tags(ids)
    return _ids_to_labels(ids)


def ilp_decode_constrained(
    z: torch.Tensor,
    crf: LinearChainCRF,
    constraints: ConstraintSet,
    scheme: LabelScheme = RAW_SCHEME,
) -> list[TagLabel]:
    ids = ilp_decode_constrained_ids(z, crf, constraints, scheme)
    return labels_for_scheme(ids, scheme)


def ilp_decode_constrained_ids(
    z: torch.Tensor,
    crf: LinearChainCRF,
    constraints: ConstraintSet,
    scheme: LabelScheme = RAW_SCHEME,
) -> list[int]:
    """Exact constrained argmax over label sequences (see module docstring).

    Branch-and-bound over the decoding lattice with unconstrained
    Viterbi-suffix upper bounds; prunes branches whose bound cannot beat the
    incumbent and branches that already broke a closed indicator window.
    If the constraint set is unsatisfiable the indicator windows are dropped
    (pair existence alone is always satisfiable).
    """
    n = z.shape[0]
    if n == 0:
        return []
    if n > MAX_EXACT_LENGTH:
        raise ValueError(f"sequence length {n} exceeds exact-search guard {MAX_EXACT_LENGTH}")
    em, trans, start, stop = _potentials(z, crf)
    result = _branch_and_bound(em, trans, start, stop, constraints, scheme)
    if result is None:
        relaxed = ConstraintSet(pair_existence=constraints.pair_existence, indicator_windows=())
        result = _branch_and_bound(em, trans, start, stop, relaxed, scheme)
    if result is None:  # pair existence alone always admits all-NONE
        raise AssertionError("constrained search failed on a satisfiable constraint set")
    return result


def _branch_and_bound(
    em: np.ndarray,
    trans: np.ndarray,
    start: np.ndarray,
    stop: np.ndarray,
    constraints: ConstraintSet,
    scheme: LabelScheme,
) -> list[int] | None:
    n, m = em.shape
    windows = constraints.clipped_windows(n)
    nw = len(windows)
    action_ids = scheme.action_ids
    object_ids = scheme.object_ids

    # suffix[i][y]: best unconstrained completion score over positions i..n-1
    # given the label at i-1 is y (transition into i included).
    suffix = np.zeros((n + 1, m))
    suffix[n] = stop
    for i in range(n - 1, 0, -1):
        suffix[i] = np.max(trans + em[i][None, :] + suffix[i + 1][None, :], axis=1)

    best_score = -np.inf
    best_labels: list[int] | None = None
    labels = [0] * n

    # Iterative DFS; each frame is (pos, next label to try, prefix score,
    # has_action, has_object, window hit flags).
    stack = [[0, 0, 0.0, False, False, (False,) * nw]]
    while stack:
        frame = stack[-1]
        pos, y, prefix, has_a, has_o, hits = frame
        if y >= m:
            stack.pop()
            continue
        frame[1] = y + 1

        step = float(start[y] + em[0, y]) if pos == 0 else float(trans[labels[pos - 1], y] + em[pos, y])
        score = prefix + step
        if score + float(suffix[pos + 1][y]) <= best_score and best_labels is not None:
            continue

        new_hits = tuple(
            hit or (s <= pos < e and y in action_ids) for hit, (s, e) in zip(hits, windows)
        )
        # A window that closes at pos+1 must already be satisfied.
        if any(e == pos + 1 and not hit for hit, (s, e) in zip(new_hits, windows)):
            continue
        labels[pos] = y
        new_a = has_a or y in action_ids
        new_o = has_o or y in object_ids

        if pos == n - 1:
            total = score + float(stop[y])
            if constraints.pair_existence and new_a != new_o:
                continue
            if total > best_score:
                best_score = total
                best_labels = labels.copy()
            continue
        stack.append([pos + 1, 0, score, new_a, new_o, new_hits])

    return best_labels


@dataclass(frozen=True)
class LatticeGraph:
    """Decoding lattice: source, n * m label nodes, sink.

    Node ids: source = 0, node(i, y) = 1 + i * m + y, sink = 1 + n * m.
    Edge weights are log-potentials, so the maximum-score source-to-sink path
    selects the Viterbi labeling (equivalently, a shortest path on negated
    weights, which is the reduction the exact decoder's integer program uses).
    """

    n: int
    m: int
    edges: tuple[tuple[int, int, float], ...]

    @property
    def num_nodes(self) -> int:
        return self.n * self.m + 2

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def source(self) -> int:
        return 0

    @property
    def sink(self) -> int:
        return 1 + self.n * self.m

    def node(self, i: int, y: int) -> int:
        return 1 + i * self.m + y

    def best_path(self) -> tuple[float, list[int]]:
        """Maximum-score source-to-sink path as (score, label ids)."""
        adj: dict[int, list[tuple[int, float]]] = {}
        for u, v, w in self.edges:
            adj.setdefault(u, []).append((v, w))
        order = [self.source] + [self.node(i, y) for i in range(self.n) for y in range(self.m)] + [self.sink]
        score = {u: -np.inf for u in order}
        back: dict[int, int] = {}
        score[self.source] = 0.0
        for u in order:
            if score[u] == -np.inf:
                continue
            for v, w in adj.get(u, []):
                if score[u] + w > score[v]:
                    score[v] = score[u] + w
                    back[v] = u
        path = []
        node = self.sink
        while node != self.source:
            node = back[node]
            if node != self.source:
                path.append((node - 1) % self.m)
        path.reverse()
        return float(score[self.sink]), path


def build_lattice(n: int, m: int, z: torch.Tensor | None = None, crf: LinearChainCRF | None = None) -> LatticeGraph:
    """Construct the decoding lattice with nm + 2 nodes and (n-1)m^2 + 2m edges.

    With ``z`` and ``crf`` given, edge weights carry emission and transition
    log-potentials; otherwise all weights are zero.
    """
    if n < 1 or m < 1:
        raise ValueError("n and m must be positive")
    if z is not None and crf is not None:
        em, trans, start, stop = _potentials(z, crf)
        if em.shape != (n, m):
            raise ValueError(f"potentials have shape {em.shape}, expected ({n}, {m})")
    else:
        em = np.zeros((n, m))
        trans = np.zeros((m, m))
        start = np.zeros(m)
        stop = np.zeros(m)

    edges: list[tuple[int, int, float]] = []
    lattice = LatticeGraph(n=n, m=m, edges=())
    for y in range(m):
        edges.append((lattice.source, lattice.node(0, y), float(start[y] + em[0, y])))
    for i in range(n - 1):
        for y in range(m):
            for y2 in range(m):
                edges.append(
                    (lattice.node(i, y), lattice.node(i + 1, y2), float(trans[y, y2] + em[i + 1, y2]))
                )
    for y in range(m):
        edges.append((lattice.node(n - 1, y), lattice.sink, float(stop[y])))
    return LatticeGraph(n=n, m=m, edges=tuple(edges))


# --------------------------------------------------------------------------
# BIO scheme conversion
# --------------------------------------------------------------------------


def tags_to_bio_ids(tags: Sequence[TagLabel]) -> list[int]:
    """Raw labels to BIO ids; a new run of the same label starts with B-."""
    index = {name: i for i, name in enumerate(BIO_LABELS)}
    out = []
    prev: TagLabel | None = None
    for t in tags:
        prefix = "I" if t == prev else "B"
        out.append(index[f"{prefix}-{t.name}"])
        prev = t
    return out


def bio_ids_to_tags(ids: Sequence[int]) -> list[TagLabel]:
    out = []
    for i in ids:
        name = BIO_LABELS[i].split("-", 1)[1]
        out.append(TagLabel[name])
    return out
