"""Moment-matrix relaxation of Eve's joint guessing probability.

The matrix is indexed by (state i, monomial k) and holds <psi_i|S_k^dag S_l|psi_j>.
Generators are Bob's outcome-0 projectors ``("B", y)`` and Eve's outcome-0
projectors ``("E", z)``, one per encoding pair z.  Outcome-1 projectors are
always expanded as ``1 - P`` before reaching this module.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .protocol import GramConstraint, ProtocolSpec, StatTable
from .sdp import ConicProblem

Letter = tuple  # ("B", y) or ("E", z)
Monomial = tuple  # tuple of letters; () is the identity

LEVELS = ("S1", "S1+AB", "S2")


def B(y: int) -> Letter:
    return ("B", int(y))


def E(z: int) -> Letter:
    return ("E", int(z))


def _collapse(letters) -> list:
    out = []
    for letter in letters:
        if not out or out[-1] != letter:
            out.append(letter)
    return out


def canonicalize(word) -> Monomial:
    """Normal form of a product of projectors.

    Bob's and Eve's operators commute, so all B letters are moved in front of
    the E letters keeping their relative order; equal neighbours merge
    (projectors are idempotent).
    """
    for letter in word:
        if letter[0] not in ("B", "E"):
            raise ValueError(f"unknown generator {letter!r}")
    bs = _collapse(l for l in word if l[0] == "B")
    es = _collapse(l for l in word if l[0] == "E")
    return tuple(bs) + tuple(es)


def adjoint(word) -> Monomial:
    """Canonical form of the adjoint (reversed word; every letter is Hermitian)."""
    return canonicalize(tuple(reversed(word)))


def format_monomial(word) -> str:
    if not word:
        return "1"
    return "*".join(f"{k}{i}" for k, i in word)


@dataclass(frozen=True)
class HierarchyLevel:
    """A named monomial set (S1, S1+AB, S2) or an explicit word list."""

    tag: str = "S1+AB"
    words: tuple | None = None

    def __post_init__(self):
        if self.words is None and self.tag not in LEVELS:
            raise ValueError(f"unknown hierarchy level {self.tag!r}; expected one of {LEVELS} or custom words")

    @classmethod
    def custom(cls, words) -> HierarchyLevel:
        return cls("custom", tuple(tuple(w) for w in words))

    def basis(self, n: int) -> list[Monomial]:
        nz = n * (n - 1) // 2
        bs = [(B(y),) for y in range(n)]
        es = [(E(z),) for z in range(nz)]
        if self.words is not None:
            raw = [()] + list(self.words)
        else:
            raw = [()] + bs + es
            if self.tag == "S2":
                raw += [(B(y), B(w)) for y in range(n) for w in range(n) if y != w]
                raw += [(E(z), E(u)) for z in range(nz) for u in range(nz) if z != u]
            if self.tag in ("S1+AB", "S2"):
                raw += [(B(y), E(z)) for y in range(n) for z in range(nz)]
        seen, out = set(), []
        for w in raw:
            c = canonicalize(w)
            if c not in seen:
                seen.add(c)
                out.append(c)
        return out


@dataclass(frozen=True, eq=False)
class MomentProblem:
    """Moment relaxation data.

    Row p of the matrix stands for the vector S_k|psi_i> with ``rows[p] = (i, k)``.
    ``cell_label[p, q]`` is the moment label of cell (p, q) and
    ``cell_conj[p, q]`` is True when the cell holds the complex conjugate of
    its label's value.  Constraints are tuples
    ``(kind, key, label, part, relation, target)``.
    """

    n: int
    level: HierarchyLevel
    basis: list
    rows: list
    labels: list
    cell_label: np.ndarray
    cell_conj: np.ndarray
    real: bool
    constraints: list
    objective: dict
    success: dict
    assumed_zero: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def q(self) -> int:
        return len(self.basis)

    @property
    def dim(self) -> int:
        return len(self.rows)

    def label_index(self, i: int, j: int, word) -> int:
        return self._index[_rep((i, j, canonicalize(word)))]

    @property
    def _index(self) -> dict:
        return {lab: t for t, lab in enumerate(self.labels)}

    def to_conic(self) -> ConicProblem:
        """Variables are the real parts of every label, then imaginary parts of
        the labels that are not self-conjugate (complex problems only)."""
        nl = len(self.labels)
        re_var = np.arange(nl)
        im_var = np.full(nl, -1)
        nvars = nl
        if not self.real:
            for t, (i, j, w) in enumerate(self.labels):
                if (j, i, adjoint(w)) != (i, j, w):
                    im_var[t] = nvars
                    nvars += 1
        d = self.dim
        pr, pc = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
        pr, pc = pr.ravel(), pc.ravel()
        lab = self.cell_label.ravel()
        conj = self.cell_conj.ravel()
        rows = [pr]
        cols = [pc]
        var = [re_var[lab]]
        coef = [np.ones(d * d, dtype=complex)]
        has_im = im_var[lab] >= 0
        if has_im.any():
            rows.append(pr[has_im])
            cols.append(pc[has_im])
            var.append(im_var[lab[has_im]])
            coef.append(np.where(conj[has_im], -1j, 1j))
        rows, cols, var, coef = map(np.concatenate, (rows, cols, var, coef))
        if self.real:
            coef = coef.real

        fixed, stat_vars, ineq_rows, ineq_h = {}, {}, [], []
        for kind, key, t, part, rel, target in self.constraints:
            v = re_var[t] if part == "re" else im_var[t]
            if v < 0:
                if abs(target) > 0 and rel == "=":
                    raise ValueError(f"constraint on absent imaginary part of {self.labels[t]}")
                continue
            if rel == "=":
                fixed[int(v)] = float(target)
                if kind == "stat":
                    stat_vars[key] = int(v)
            else:
                g = np.zeros(nvars)
                g[v] = 1.0 if rel == "<=" else -1.0
                ineq_rows.append(g)
                ineq_h.append(target if rel == "<=" else -target)
        obj = np.zeros(nvars)
        for t, w in self.objective.items():
            obj[re_var[t]] += w
        G = np.array(ineq_rows).reshape(len(ineq_rows), nvars)
        return ConicProblem(
            dim=d,
            hermitian=not self.real,
            rows=rows,
            cols=cols,
            var=var,
            coef=coef,
            nvars=nvars,
            objective=obj,
            fixed=fixed,
            ineq_G=G,
            ineq_h=np.array(ineq_h, dtype=float),
            stat_vars=stat_vars,
            trace_bound=float(d),
            assumed_zero=self.assumed_zero,
            precondition=self.whitening(),
        )

    def whitening(self) -> np.ndarray | None:
        """Congruence that orthonormalizes the states within each monomial block.

        Rows S_k|psi_i> for fixed k inherit the Gram matrix's small eigenvalues
        (nearly parallel coherent states); T = L^-1 with L L^H the Gram
        submatrix of the states present in block k removes that scale.
        """
        gamma = self.meta.get("gamma")
        if gamma is None:
            return None
        T = np.zeros((self.dim, self.dim), dtype=float if self.real else complex)
        by_block: dict = {}
        for p, (i, k) in enumerate(self.rows):
            by_block.setdefault(k, []).append((p, i))
        for members in by_block.values():
            ps = [p for p, _ in members]
            states = [i for _, i in members]
            G = gamma[np.ix_(states, states)]
            try:
                L = np.linalg.cholesky(G.real if self.real else G)
            except np.linalg.LinAlgError:
                return None
            T[np.ix_(ps, ps)] = np.linalg.inv(L)
        return T

    def evaluate(self, gamma_matrix: np.ndarray) -> dict:
        """Label values read off a concrete moment matrix (for realization checks)."""
        vals = {}
        for (p, q), t in np.ndenumerate(self.cell_label):
            v = gamma_matrix[p, q]
            vals.setdefault(int(t), np.conj(v) if self.cell_conj[p, q] else v)
        return vals

    def to_text(self) -> str:
        """Plain-text dump: basis, labels, constraints and objective triplets."""
        buf = io.StringIO()
        buf.write(f"# moment problem n={self.n} level={self.level.tag} q={self.q} real={self.real}\n")
        buf.write("[basis]\n")
        for k, w in enumerate(self.basis):
            buf.write(f"{k} {format_monomial(w)}\n")
        buf.write("[rows]\n")
        for p, (i, k) in enumerate(self.rows):
            buf.write(f"{p} {i} {k}\n")
        buf.write("[labels]\n")
        for t, (i, j, w) in enumerate(self.labels):
            buf.write(f"{t} {i} {j} {format_monomial(w)}\n")
        buf.write("[cells]\n")
        for (p, q), t in np.ndenumerate(self.cell_label):
            if p <= q:
                buf.write(f"{p} {q} {t} {int(self.cell_conj[p, q])}\n")
        buf.write("[constraints]\n")
        for kind, key, t, part, rel, target in self.constraints:
            buf.write(f"{kind} {key} {t} {part} {rel} {target!r}\n")
        buf.write("[objective]\n")
        for t, w in sorted(self.objective.items()):
            buf.write(f"{t} {w!r}\n")
        buf.write("[success]\n")
        for t, w in sorted(self.success.items()):
            buf.write(f"{t} {w!r}\n")
        return buf.getvalue()


def _rep(key):
    i, j, w = key
    return min(key, (j, i, adjoint(w)))


def guessing_weights(spec: ProtocolSpec) -> tuple[dict, dict]:
    """Linear forms of the joint guessing probability and of p(succ).

    Keys are ``(x, word)`` for <psi_x|word|psi_x>; E_{1|r} is expanded as 1 - E_{0|r}.
    """
    guess, succ = {}, {}
    for z, (pr, r) in enumerate(zip(spec.p_r, spec.pairs)):
        for k in (0, 1):
            x = r[k]
            for y in r:
                w = pr * spec.p_k[k] * spec.p_y[y]
                succ[(x, (B(y),))] = succ.get((x, (B(y),)), 0.0) + w
                be = (x, canonicalize((B(y), E(z))))
                if k == 0:
                    guess[be] = guess.get(be, 0.0) + w
                else:
                    guess[(x, (B(y),))] = guess.get((x, (B(y),)), 0.0) + w
                    guess[be] = guess.get(be, 0.0) - w
    return guess, succ


def _merge_states(form: dict, rep: list) -> dict:
    out: dict = {}
    for (x, w), c in form.items():
        out[(rep[x], w)] = out.get((rep[x], w), 0.0) + c
    return out


def _bpart(word):
    return [l for l in word if l[0] == "B"]


def _kills(word, x, zero) -> bool:
    b = _bpart(word)
    return bool(b) and (x, b[-1][1]) in zero


def build_problem(
    spec: ProtocolSpec,
    gram: GramConstraint,
    stats: StatTable,
    level: HierarchyLevel | str = "S1+AB",
    real: bool | None = None,
    facial_reduction: bool = True,
) -> MomentProblem:
    """Assemble the relaxation maximizing p(e=k, succ).

    ``real`` restricts all moments to real values; it is valid (and the
    default) when the Gram matrix is real, because complex conjugation then
    maps feasible points to feasible points with the same objective.

    With ``facial_reduction`` every exactly-zero probability p(0|x,y) = 0 is
    used to drop the rows S|psi_x> whose rightmost Bob operator is B_y (they
    vanish) and to pin the moments that must vanish with them.  Without it the
    moment matrix would have no interior.  Such problems carry the zero cells
    as assumptions and their certificates are not reusable for other data.
    """
    if isinstance(level, str):
        level = HierarchyLevel(level)
    n = spec.n
    if gram.n != n or stats.n != n:
        raise ValueError("spec, Gram constraint and statistics disagree on n")
    if real is None:
        real = gram.is_real
    if real and not gram.is_real:
        raise ValueError("real relaxation requested for a complex Gram matrix")
    p0 = stats.conditional()
    g = gram.gamma
    # states with overlap exactly 1 are the same vector: keep one representative
    rep_of = list(range(n))
    if gram.mode == "exact":
        for x in range(n):
            rep_of[x] = next((i for i in range(x) if rep_of[i] == i and g[i, x] == 1.0), x)
    states = [x for x in range(n) if rep_of[x] == x]
    zero = set()
    if facial_reduction:
        zero = {(int(x), int(y)) for x, y in np.argwhere(p0 == 0.0) if rep_of[x] == x}

    def vanishes(i, j, w):
        # <psi_i| w |psi_j> = 0 when w's Bob part kills psi_j or psi_i
        b = _bpart(w)
        return bool(b) and ((j, b[-1][1]) in zero or (i, b[0][1]) in zero)

    basis = level.basis(n)
    q = len(basis)
    rows = [(i, k) for i in states for k in range(q) if not _kills(basis[k], i, zero)]
    d = len(rows)
    index: dict = {}
    labels: list = []
    cell_label = np.empty((d, d), dtype=np.int64)
    cell_conj = np.zeros((d, d), dtype=bool)
    adj = [adjoint(w) for w in basis]
    for p, (i, k) in enumerate(rows):
        for c, (j, l) in enumerate(rows):
            key = (i, j, canonicalize(adj[k] + basis[l]))
            rep = _rep(key)
            t = index.get(rep)
            if t is None:
                t = index[rep] = len(labels)
                labels.append(rep)
            cell_label[p, c] = t
            cell_conj[p, c] = (rep != key) and not real
    guess, succ = guessing_weights(spec)
    guess = _merge_states(guess, rep_of)
    succ = _merge_states(succ, rep_of)
    missing = sorted({_rep((x, x, w)) for x, w in guess if not vanishes(x, x, w)} - index.keys())
    if missing:
        names = ", ".join(f"<psi_{i}|{format_monomial(w)}|psi_{j}>" for i, j, w in missing)
        raise ValueError(f"hierarchy level too small for the objective; missing moments: {names}")

    constraints = []
    for i in states:
        constraints.append(("norm", (i,), index[(i, i, ())], "re", "=", 1.0))
        for j in (j for j in states if j > i):
            t = index[(i, j, ())]
            if gram.mode == "exact":
                constraints.append(("gram", (i, j), t, "re", "=", float(g[i, j].real)))
                if not real:
                    constraints.append(("gram", (i, j), t, "im", "=", float(g[i, j].imag)))
            else:
                parts = [("re", g[i, j].real)] + ([] if real else [("im", g[i, j].imag)])
                for part, val in parts:
                    constraints.append(("gram", (i, j), t, part, "<=", float(val + gram.epsilon)))
                    constraints.append(("gram", (i, j), t, part, ">=", float(val - gram.epsilon)))
    # a duplicate's statistics describe the same vector; the representative's are used
    for x in states:
        for y in range(n):
            if (x, y) not in zero:
                constraints.append(("stat", (x, y), index[(x, x, (B(y),))], "re", "=", float(p0[x, y])))
    for t, lab in enumerate(labels):
        if vanishes(*lab):
            constraints.append(("zero", lab, t, "re", "=", 0.0))
            constraints.append(("zero", lab, t, "im", "=", 0.0))

    objective: dict = {}
    for (x, w), c in guess.items():
        rep = _rep((x, x, w))
        if rep in index:
            objective[index[rep]] = objective.get(index[rep], 0.0) + c
    success = {index[_rep((x, x, w))]: c for (x, w), c in succ.items() if _rep((x, x, w)) in index}
    return MomentProblem(
        n=n,
        level=level,
        basis=basis,
        rows=rows,
        labels=labels,
        cell_label=cell_label,
        cell_conj=cell_conj,
        real=real,
        constraints=constraints,
        objective=objective,
        success=success,
        assumed_zero=tuple(sorted(zero)),
        meta={"gram_mode": gram.mode, "epsilon": gram.epsilon, "gamma": np.array(gram.gamma), "representative": rep_of},
    )


def hermitian_to_real(problem) -> ConicProblem:
    """Real embedding X + iY  ->  [[X, -Y], [Y, X]] of a Hermitian conic problem.

    Accepts a :class:`MomentProblem` or a :class:`ConicProblem`.  The variable
    vector, objective and linear constraints are unchanged, so optima coincide.
    """
    cp = problem.to_conic() if isinstance(problem, MomentProblem) else problem
    d = cp.dim
    if not cp.hermitian:
        re = np.asarray(cp.coef, dtype=float)
        rows = np.concatenate([cp.rows, cp.rows + d])
        cols = np.concatenate([cp.cols, cp.cols + d])
        return cp.replace(
            dim=2 * d,
            hermitian=False,
            rows=rows,
            cols=cols,
            var=np.concatenate([cp.var, cp.var]),
            coef=np.concatenate([re, re]),
            const=None if cp.const is None else np.kron(np.eye(2), cp.const.real),
            trace_bound=None if cp.trace_bound is None else 2 * cp.trace_bound,
            precondition=None if cp.precondition is None else np.kron(np.eye(2), cp.precondition.real),
        )
    re, im = cp.coef.real, cp.coef.imag
    nz_re, nz_im = re != 0, im != 0
    r, c, v = cp.rows, cp.cols, cp.var
    rows = np.concatenate([r[nz_re], r[nz_re] + d, r[nz_im] + d, r[nz_im]])
    cols = np.concatenate([c[nz_re], c[nz_re] + d, c[nz_im], c[nz_im] + d])
    var = np.concatenate([v[nz_re], v[nz_re], v[nz_im], v[nz_im]])
    coef = np.concatenate([re[nz_re], re[nz_re], im[nz_im], -im[nz_im]])
    const = None
    if cp.const is not None:
        X, Y = cp.const.real, cp.const.imag
        const = np.block([[X, -Y], [Y, X]])
    T = cp.precondition
    if T is not None:
        T = np.block([[T.real, -T.imag], [T.imag, T.real]])
    return cp.replace(
        dim=2 * d,
        hermitian=False,
        rows=rows,
        cols=cols,
        var=var,
        coef=coef,
        const=const,
        trace_bound=None if cp.trace_bound is None else 2 * cp.trace_bound,
        precondition=T,
    )
