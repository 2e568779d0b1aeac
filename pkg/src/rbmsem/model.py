"""Declarative SEM specification and model-implied moments.

A model is described by six pattern matrices (nu, Lambda, Theta, alpha, B, Psi).
Every cell of a pattern is either fixed to a value or tied to a free parameter
index.  Several cells may share one index (an equality constraint), and cells of
symmetric patterns are mirrored.  All cells are linear in the parameters, so the
derivative of each matrix with respect to the parameter vector is a constant
stack of 0/1 matrices, which the likelihood code reuses.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

MATRIX_NAMES = ("nu", "lambda", "theta", "alpha", "b", "psi")
PIVOT_TOL = 1e-12


class SpecError(ValueError):
    """Raised for malformed model specifications or parameter vectors."""


class SingularStructureError(ArithmeticError):
    """Raised when I - B cannot be inverted."""


@dataclass(frozen=True, eq=False)
class MatrixPattern:
    """Fixed values and free-parameter slots of one model matrix.

    Parameters
    ----------
    fixed : ndarray
        Values of the fixed cells. Entries under free cells are ignored.
    free : ndarray of int
        Parameter index of each free cell, ``-1`` for fixed cells.
    kind : {"general", "symmetric", "diagonal"}
    """

    fixed: np.ndarray
    free: np.ndarray
    kind: str = "general"

    def __post_init__(self):
        fixed = np.array(self.fixed, dtype=float)
        free = np.array(self.free, dtype=int)
        if fixed.ndim != 2 or fixed.shape != free.shape:
            raise SpecError("fixed and free must be 2-d arrays of equal shape")
        if self.kind not in ("general", "symmetric", "diagonal"):
            raise SpecError(f"unknown pattern kind {self.kind!r}")
        fixed = np.where(free >= 0, 0.0, fixed)
        if self.kind != "general":
            if fixed.shape[0] != fixed.shape[1]:
                raise SpecError(f"{self.kind} pattern must be square")
            if not (np.array_equal(free, free.T) and np.array_equal(fixed, fixed.T)):
                raise SpecError("symmetric pattern cells must be mirrored")
        if self.kind == "diagonal":
            off = ~np.eye(fixed.shape[0], dtype=bool)
            if np.any(free[off] >= 0) or np.any(fixed[off] != 0):
                raise SpecError("diagonal pattern has non-zero off-diagonal cells")
        fixed.flags.writeable = False
        free.flags.writeable = False
        object.__setattr__(self, "fixed", fixed)
        object.__setattr__(self, "free", free)

    @classmethod
    def zeros(cls, rows, cols, kind="general"):
        return cls(np.zeros((rows, cols)), -np.ones((rows, cols), dtype=int), kind)

    @property
    def shape(self):
        return self.fixed.shape

    @property
    def symmetric(self):
        return self.kind != "general"

    def cells(self):
        """Yield ``(i, j, index)`` for free cells, lower triangle only if symmetric."""
        rows, cols = self.shape
        for i in range(rows):
            for j in range(cols if not self.symmetric else i + 1):
                if self.free[i, j] >= 0:
                    yield i, j, int(self.free[i, j])


class SEMMatrices(NamedTuple):
    """Full numeric model matrices. ``nu`` and ``alpha`` are 1-d."""

    nu: np.ndarray
    lambda_: np.ndarray
    theta: np.ndarray
    alpha: np.ndarray
    bmat: np.ndarray
    psi: np.ndarray


class MomentStructure(NamedTuple):
    mu: np.ndarray
    sigma: np.ndarray
    sigma_star: np.ndarray


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Parameter values together with their labels."""

    values: np.ndarray
    labels: tuple

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        if len(values) != len(self.labels):
            raise SpecError("values and labels differ in length")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", tuple(self.labels))

    def __len__(self):
        return len(self.values)

    def __array__(self, dtype=None, copy=None):
        return np.array(self.values, dtype=dtype)

    def __getitem__(self, key):
        if isinstance(key, str):
            return float(self.values[self.labels.index(key)])
        return self.values[key]

    def as_dict(self):
        return dict(zip(self.labels, self.values.tolist()))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A linear SEM: measurement ``y = nu + Lambda eta + eps``, structure
    ``eta = alpha + B eta + zeta``.

    ``labels`` names the free parameters in index order.  When
    ``mean_structure`` is false the data are centred at the sample mean and
    nu, alpha carry no free parameters.
    """

    p: int
    q: int
    nu: MatrixPattern
    lambda_: MatrixPattern
    theta: MatrixPattern
    alpha: MatrixPattern
    bmat: MatrixPattern
    psi: MatrixPattern
    labels: tuple
    mean_structure: bool = True
    name: str = "custom"
    lower: np.ndarray | None = field(default=None)
    upper: np.ndarray | None = field(default=None)

    def __post_init__(self):
        p, q = self.p, self.q
        expected = {
            "nu": (p, 1), "lambda": (p, q), "theta": (p, p),
            "alpha": (q, 1), "b": (q, q), "psi": (q, q),
        }
        for name, shape in expected.items():
            if self.pattern(name).shape != shape:
                raise SpecError(f"{name} pattern has shape {self.pattern(name).shape}, expected {shape}")
        for name in ("theta", "psi"):
            if not self.pattern(name).symmetric:
                raise SpecError(f"{name} must be a symmetric or diagonal pattern")
        b = self.bmat
        if np.any(np.diag(b.free) >= 0) or np.any(np.diag(b.fixed) != 0):
            raise SpecError("diagonal of B must be fixed at 0")

        owner = {}
        for name in MATRIX_NAMES:
            for _, _, k in self.pattern(name).cells():
                if owner.setdefault(k, name) != name:
                    raise SpecError(f"parameter {k} appears in both {owner[k]} and {name}")
        m = len(self.labels)
        if sorted(owner) != list(range(m)):
            raise SpecError(f"free indices must be exactly 0..{m - 1}")
        if len(set(self.labels)) != m:
            raise SpecError("parameter labels must be unique")
        if m > p + p * (p + 1) // 2:
            raise SpecError(f"{m} free parameters exceed the {p + p * (p + 1) // 2} sample moments")
        if not self.mean_structure and (np.any(self.nu.free >= 0) or np.any(self.alpha.free >= 0)):
            raise SpecError("a model without mean structure cannot have free nu or alpha")
        object.__setattr__(self, "labels", tuple(self.labels))
        for attr in ("lower", "upper"):
            val = getattr(self, attr)
            if val is not None:
                val = np.array(val, dtype=float).reshape(-1)
                if len(val) != m:
                    raise SpecError(f"{attr} bounds must have length {m}")
                object.__setattr__(self, attr, val)

    def pattern(self, name) -> MatrixPattern:
        return getattr(self, _ATTR[name])

    @property
    def m(self) -> int:
        return len(self.labels)

    @cached_property
    def param_cells(self):
        """Per parameter index, the list of ``(matrix, i, j)`` cells it occupies."""
        out = [[] for _ in range(self.m)]
        for name in MATRIX_NAMES:
            for i, j, k in self.pattern(name).cells():
                out[k].append((name, i, j))
        return out

    @cached_property
    def param_matrix(self):
        """Name of the matrix holding each parameter."""
        return tuple(cells[0][0] for cells in self.param_cells)

    @cached_property
    def variance_mask(self):
        """True for parameters sitting on the diagonal of Theta or Psi."""
        return np.array([
            cells[0][0] in ("theta", "psi") and all(i == j for _, i, j in cells)
            for cells in self.param_cells
        ])

    @cached_property
    def derivative_stacks(self):
        """``{name: D}`` with ``D[a] = d matrix / d theta_a`` (shape ``(m, rows, cols)``)."""
        out = {}
        for name in MATRIX_NAMES:
            pat = self.pattern(name)
            d = np.zeros((self.m,) + pat.shape)
            rows, cols = np.nonzero(pat.free >= 0)
            d[pat.free[rows, cols], rows, cols] = 1.0
            d.flags.writeable = False
            out[name] = d
        return out

    def param_vector(self, values) -> ParamVector:
        values = np.asarray(values, dtype=float).reshape(-1)
        if len(values) != self.m:
            raise SpecError(f"expected {self.m} parameters, got {len(values)}")
        return ParamVector(values, self.labels)

    def with_bounds(self, lower, upper) -> "ModelSpec":
        return _replace(self, lower=lower, upper=upper)

    def to_dict(self) -> dict:
        """Serialize to the JSON specification format (1-based cells)."""
        mats = {}
        for name in MATRIX_NAMES:
            pat = self.pattern(name)
            cells = []
            rows, cols = pat.shape
            for i in range(rows):
                for j in range(cols if not pat.symmetric else i + 1):
                    k = pat.free[i, j]
                    if k >= 0:
                        cells.append({"row": i + 1, "col": j + 1, "free": self.labels[k]})
                    elif pat.fixed[i, j] != 0:
                        cells.append({"row": i + 1, "col": j + 1, "fixed": float(pat.fixed[i, j])})
            mats[name] = cells
        return {
            "name": self.name, "p": self.p, "q": self.q,
            "mean_structure": self.mean_structure,
            "kinds": {"theta": self.theta.kind, "psi": self.psi.kind},
            "labels": list(self.labels),
            "matrices": mats,
        }


_ATTR = {"nu": "nu", "lambda": "lambda_", "theta": "theta", "alpha": "alpha", "b": "bmat", "psi": "psi"}


def _replace(spec, **changes):
    kw = {f: getattr(spec, f) for f in spec.__dataclass_fields__}
    kw.update(changes)
    return ModelSpec(**kw)


def spec_from_dict(doc: dict) -> ModelSpec:
    """Build a spec from the JSON document format.

    Each matrix is a list of cells ``{"row", "col", "fixed" | "free"}`` with
    1-based indices; unlisted cells are fixed at 0.  Cells of Theta and Psi
    may be given in either triangle and are mirrored.  A label used in more
    than one cell is one parameter.  Unless ``labels`` fixes the order,
    parameters are numbered by first appearance in the order nu, Lambda
    (row-major), Theta (lower triangle), alpha, B (row-major), Psi (lower
    triangle).
    """
    if "preset" in doc:
        from . import presets
        return presets.get_preset(doc["preset"], **doc.get("options", {}))
    try:
        p, q = int(doc["p"]), int(doc["q"])
        matrices = doc["matrices"]
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecError(f"malformed specification: {exc}") from None
    kinds = {"theta": "symmetric", "psi": "symmetric"}
    kinds.update(doc.get("kinds", {}))
    shapes = {"nu": (p, 1), "lambda": (p, q), "theta": (p, p), "alpha": (q, 1), "b": (q, q), "psi": (q, q)}
    sym = {"theta", "psi"}

    raw = {}
    for name in MATRIX_NAMES:
        fixed = np.zeros(shapes[name])
        tags = np.full(shapes[name], None, dtype=object)
        for cell in matrices.get(name, []):
            try:
                i, j = int(cell["row"]) - 1, int(cell["col"]) - 1
            except (KeyError, TypeError, ValueError):
                raise SpecError(f"cell without row/col in {name}") from None
            if not (0 <= i < shapes[name][0] and 0 <= j < shapes[name][1]):
                raise SpecError(f"cell ({i + 1}, {j + 1}) outside {name} of shape {shapes[name]}")
            if ("free" in cell) == ("fixed" in cell):
                raise SpecError(f"cell ({i + 1}, {j + 1}) of {name} needs exactly one of fixed/free")
            if name in sym and i < j:
                i, j = j, i
            if "free" in cell:
                tags[i, j] = str(cell["free"])
            else:
                fixed[i, j] = float(cell["fixed"])
            if name in sym:
                tags[j, i], fixed[j, i] = tags[i, j], fixed[i, j]
        raw[name] = (fixed, tags)

    order = list(doc.get("labels", []))
    for name in MATRIX_NAMES:
        tags = raw[name][1]
        rows, cols = tags.shape
        for i in range(rows):
            for j in range(cols if name not in sym else i + 1):
                if tags[i, j] is not None and tags[i, j] not in order:
                    order.append(tags[i, j])
    index = {lab: k for k, lab in enumerate(order)}
    pats = {}
    for name in MATRIX_NAMES:
        fixed, tags = raw[name]
        free = np.vectorize(lambda t: index[t] if t is not None else -1, otypes=[int])(tags)
        kind = kinds[name] if name in sym else "general"
        pats[_ATTR[name]] = MatrixPattern(fixed, free, kind)
    used = {k for name in MATRIX_NAMES for _, _, k in pats[_ATTR[name]].cells()}
    if len(used) != len(order):
        raise SpecError("labels lists parameters that no cell uses")
    return ModelSpec(
        p=p, q=q, labels=tuple(order),
        mean_structure=bool(doc.get("mean_structure", True)),
        name=str(doc.get("name", "custom")), **pats,
    )


def load_spec(source) -> ModelSpec:
    """Load a spec from a preset name, a JSON file path, or a parsed document."""
    if isinstance(source, ModelSpec):
        return source
    if isinstance(source, dict):
        return spec_from_dict(source)
    from . import presets
    if str(source) in presets.PRESETS:
        return presets.get_preset(str(source))
    path = Path(source)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecError(f"cannot read model specification {source}: {exc}") from None
    return spec_from_dict(doc)


def structure_matrix(i, j, shape, symmetric=False):
    """Derivative of a matrix with respect to its ``(i, j)`` entry (0-based).

    For a symmetric matrix the mirrored cell moves too, so the result is
    ``J_ij + J_ji - J_ij J_ij``.
    """
    rows, cols = shape
    if not (0 <= i < rows and 0 <= j < cols):
        raise IndexError(f"cell ({i}, {j}) outside shape {shape}")
    jij = np.zeros(shape)
    jij[i, j] = 1.0
    if not symmetric:
        return jij
    if rows != cols:
        raise ValueError("symmetric structure matrix needs a square shape")
    return jij + jij.T - jij @ jij


def pack(matrices: SEMMatrices, spec: ModelSpec) -> ParamVector:
    """Read the free cells of full model matrices into a parameter vector."""
    mats = _as_matrix_dict(matrices)
    values = np.full(spec.m, np.nan)
    for name in MATRIX_NAMES:
        pat = spec.pattern(name)
        mat = mats[name]
        if mat.shape != pat.shape:
            raise SpecError(f"{name} has shape {mat.shape}, spec expects {pat.shape}")
        fixed = pat.free < 0
        if np.any(mat[fixed] != pat.fixed[fixed]):
            raise SpecError(f"{name} conflicts with its fixed cells")
        rows, cols = np.nonzero(~fixed)
        for i, j in zip(rows, cols):
            k = pat.free[i, j]
            if np.isnan(values[k]):
                values[k] = mat[i, j]
            elif values[k] != mat[i, j]:
                raise SpecError(f"cells of parameter {spec.labels[k]!r} disagree in {name}")
    return ParamVector(values, spec.labels)


def unpack(theta, spec: ModelSpec) -> SEMMatrices:
    """Fill the model matrices from a parameter vector."""
    theta = _check_theta(theta, spec)
    mats = unpack_batch(theta[None, :], spec)
    return SEMMatrices(
        nu=mats["nu"][0, :, 0], lambda_=mats["lambda"][0], theta=mats["theta"][0],
        alpha=mats["alpha"][0, :, 0], bmat=mats["b"][0], psi=mats["psi"][0],
    )


def unpack_batch(thetas: np.ndarray, spec: ModelSpec) -> dict:
    """Vectorized unpack: ``thetas`` has shape ``(K, m)``; matrices gain a leading K axis."""
    d = spec.derivative_stacks
    return {
        name: spec.pattern(name).fixed + np.einsum("ka,arc->krc", thetas, d[name])
        for name in MATRIX_NAMES
    }


def lu_min_pivot(a: np.ndarray) -> np.ndarray:
    """Smallest absolute pivot of partial-pivoting LU, batched over the leading axis."""
    u = np.array(a, dtype=float, copy=True)
    k_batch, n = u.shape[0], u.shape[-1]
    piv = np.full(k_batch, np.inf)
    idx = np.arange(k_batch)
    for c in range(n):
        r = c + np.argmax(np.abs(u[:, c:, c]), axis=1)
        u[idx, c], u[idx, r] = u[idx, r].copy(), u[idx, c].copy()
        pc = u[:, c, c]
        piv = np.minimum(piv, np.abs(pc))
        if c + 1 < n:
            with np.errstate(divide="ignore", invalid="ignore"):
                f = u[:, c + 1:, c] / pc[:, None]
            u[:, c + 1:, :] -= f[:, :, None] * u[:, c, None, :]
    return piv


def structure_batch(thetas: np.ndarray, spec: ModelSpec) -> dict:
    """Matrices and intermediate products for a batch of parameter vectors.

    Returns a dict with the unpacked matrices plus ``bt = (I - B)^-1``,
    ``kappa = bt alpha``, ``psit = bt Psi bt'``, ``lb = Lambda bt``, ``mu``,
    ``sigma_star`` and ``sigma``.  Raises :class:`SingularStructureError`
    if any ``I - B`` has a pivot below ``PIVOT_TOL``.
    """
    mats = unpack_batch(thetas, spec)
    k, q = thetas.shape[0], spec.q
    b = mats["b"]
    if not np.any(spec.bmat.free >= 0) and not np.any(spec.bmat.fixed):
        bt = np.broadcast_to(np.eye(q), (k, q, q))
    else:
        imb = np.eye(q) - b
        if np.any(lu_min_pivot(imb) < PIVOT_TOL):
            raise SingularStructureError("I - B is singular")
        bt = np.linalg.inv(imb)
    lam = mats["lambda"]
    kappa = bt @ mats["alpha"]
    psit = bt @ mats["psi"] @ np.swapaxes(bt, -1, -2)
    lb = lam @ bt
    sigma_star = lam @ psit @ np.swapaxes(lam, -1, -2)
    sigma_star = 0.5 * (sigma_star + np.swapaxes(sigma_star, -1, -2))
    sigma = sigma_star + mats["theta"]
    mu = (mats["nu"] + lam @ kappa)[..., 0]
    mats.update(bt=bt, kappa=kappa, psit=psit, lb=lb, mu=mu, sigma_star=sigma_star, sigma=sigma)
    return mats


def implied_moments(theta, spec: ModelSpec) -> MomentStructure:
    """Model-implied mean ``nu + Lambda (I-B)^-1 alpha`` and covariance
    ``Lambda (I-B)^-1 Psi (I-B)^-T Lambda' + Theta``."""
    theta = _check_theta(theta, spec)
    s = structure_batch(theta[None, :], spec)
    return MomentStructure(mu=s["mu"][0], sigma=s["sigma"][0], sigma_star=s["sigma_star"][0])


def reliability(theta, spec: ModelSpec) -> float:
    """Average over indicators of the share of variance explained by the latent part."""
    mom = implied_moments(theta, spec)
    diag = np.diag(mom.sigma)
    if np.any(diag <= 0):
        raise ValueError("implied covariance has a non-positive diagonal entry")
    return float(np.mean(np.diag(mom.sigma_star) / diag))


def _check_theta(theta, spec):
    values = np.asarray(theta, dtype=float).reshape(-1)
    if len(values) != spec.m:
        raise SpecError(f"expected {spec.m} parameters, got {len(values)}")
    return values


def _as_matrix_dict(matrices):
    if isinstance(matrices, SEMMatrices):
        matrices = matrices._asdict()
    out = {}
    for name in MATRIX_NAMES:
        key = _ATTR[name] if _ATTR[name] in matrices else name
        mat = np.asarray(matrices[key], dtype=float)
        if name in ("nu", "alpha") and mat.ndim == 1:
            mat = mat[:, None]
        out[name] = mat
    return out


def matrices_like(spec: ModelSpec, **values: Sequence) -> SEMMatrices:
    """Full matrices equal to the fixed cells, with selected matrices overridden."""
    base = {
        "nu": spec.nu.fixed[:, 0], "lambda_": spec.lambda_.fixed, "theta": spec.theta.fixed,
        "alpha": spec.alpha.fixed[:, 0], "bmat": spec.bmat.fixed, "psi": spec.psi.fixed,
    }
    for key, val in values.items():
        base[key] = np.asarray(val, dtype=float)
    return SEMMatrices(**base)
