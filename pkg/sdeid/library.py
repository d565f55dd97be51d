from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import sympy
from sympy.parsing.sympy_parser import convert_xor, parse_expr, standard_transformations

from sdeid import config
from sdeid.errors import InvalidArgumentError, UnsupportedModelError

X = sympy.Symbol("x", real=True)

_TRANSFORMATIONS = standard_transformations + (convert_xor,)
_MAX_DERIVATIVE_ORDER = 2


def parse_term(text: str) -> sympy.Expr:
    text = str(text).strip()
    if not text:
        raise InvalidArgumentError("Empty term expression")
    try:
        expr = parse_expr(text, local_dict={"x": X}, transformations=_TRANSFORMATIONS)
    except Exception as exc:
        raise InvalidArgumentError(f"Could not parse term '{text}': {exc}") from exc
    expr = sympy.sympify(expr)
    extra = expr.free_symbols - {X}
    if extra:
        names = ", ".join(sorted(str(s) for s in extra))
        raise InvalidArgumentError(f"Term '{text}' uses unknown symbols: {names}")
    return expr


def term_name(expr: sympy.Expr) -> str:
    return sympy.sstr(expr).replace("**", "^").replace(" ", "")


def _lambdify(expr: sympy.Expr) -> Callable[[np.ndarray], np.ndarray]:
    fn = sympy.lambdify(X, expr, modules="numpy")

    def evaluate(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        # constants lambdify to a scalar
        return np.broadcast_to(np.asarray(fn(x), dtype=np.float64), x.shape).copy()

    return evaluate


@dataclass(frozen=True, eq=False)
class LibraryTerm:
    """One named basis function of a library.

    Terms built from a sympy expression carry exact first and second
    derivatives. Terms built from a bare callable can be evaluated but not
    differentiated.
    """

    name: str
    expr: sympy.Expr | None = None
    func: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)
    _derivatives: tuple = field(default=(), repr=False)

    def __post_init__(self) -> None:
        if not self.name:
            raise InvalidArgumentError("Library terms need a name")
        if self.expr is None and self.func is None:
            raise InvalidArgumentError(f"Term '{self.name}' has neither an expression nor a callable")
        if self.expr is not None:
            derivs = tuple(
                _lambdify(sympy.diff(self.expr, X, order)) for order in range(_MAX_DERIVATIVE_ORDER + 1)
            )
            object.__setattr__(self, "_derivatives", derivs)
            if self.func is None:
                object.__setattr__(self, "func", derivs[0])

    @classmethod
    def from_expression(cls, expr: str | sympy.Expr) -> "LibraryTerm":
        expr = parse_term(expr) if isinstance(expr, str) else sympy.sympify(expr)
        return cls(name=term_name(expr), expr=expr)

    @classmethod
    def from_callable(cls, name: str, func: Callable[[np.ndarray], np.ndarray]) -> "LibraryTerm":
        return cls(name=name, func=func)

    @property
    def differentiable(self) -> bool:
        return bool(self._derivatives)

    @property
    def is_polynomial(self) -> bool:
        return self.expr is not None and bool(self.expr.is_polynomial(X))

    def __call__(self, x) -> np.ndarray:
        assert self.func is not None
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(np.asarray(self.func(x), dtype=np.float64), x.shape)

    def derivative(self, x, order: int) -> np.ndarray:
        if order < 0 or order > _MAX_DERIVATIVE_ORDER:
            raise UnsupportedModelError(f"Derivative order {order} is not supported (0, 1 or 2)")
        if order == 0:
            return self(x)
        if not self.differentiable:
            raise UnsupportedModelError(f"Term '{self.name}' has no registered derivative")
        return self._derivatives[order](x)

    def power_coefficients(self) -> np.ndarray | None:
        if not self.is_polynomial:
            return None
        coeffs = sympy.Poly(self.expr, X).all_coeffs()[::-1]
        return np.array([float(c) for c in coeffs], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class FunctionLibrary:
    terms: tuple[LibraryTerm, ...]
    name: str = "library"

    def __post_init__(self) -> None:
        terms = tuple(self.terms)
        names = [term.name for term in terms]
        if len(set(names)) != len(names):
            raise InvalidArgumentError(f"Library '{self.name}' has duplicate term names")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def monomials(cls, degree: int = config.LIBRARY_DEGREE, name: str = "monomials") -> "FunctionLibrary":
        if degree < 0:
            raise InvalidArgumentError("'degree' must be >= 0")
        return cls(tuple(LibraryTerm.from_expression(X**p) for p in range(degree + 1)), name=name)

    @classmethod
    def from_names(cls, names: str | Iterable[str], name: str = "library") -> "FunctionLibrary":
        if isinstance(names, str):
            names = [part for part in names.split(",")]
        parsed = [part.strip() for part in names if str(part).strip()]
        return cls(tuple(LibraryTerm.from_expression(part) for part in parsed), name=name)

    @property
    def names(self) -> list[str]:
        return [term.name for term in self.terms]

    @property
    def differentiable(self) -> bool:
        return all(term.differentiable for term in self.terms)

    def __len__(self) -> int:
        return len(self.terms)

    def evaluate(self, x, order: int = 0) -> np.ndarray:
        """Matrix with one column per term, evaluated (or differentiated) at x."""
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        if not self.terms:
            return np.zeros((x.size, 0), dtype=np.float64)
        return np.column_stack([term.derivative(x, order) for term in self.terms])


@dataclass(frozen=True, eq=False)
class SparseModel:
    library: FunctionLibrary
    coefficients: np.ndarray

    def __post_init__(self) -> None:
        coefficients = np.array(self.coefficients, dtype=np.float64, copy=True).reshape(-1)
        if coefficients.size != len(self.library):
            raise InvalidArgumentError(
                f"Model has {coefficients.size} coefficients for {len(self.library)} library terms"
            )
        if not np.all(np.isfinite(coefficients)):
            raise InvalidArgumentError("Model coefficients must be finite")
        coefficients.setflags(write=False)
        object.__setattr__(self, "coefficients", coefficients)

    @classmethod
    def zeros(cls, library: FunctionLibrary) -> "SparseModel":
        return cls(library, np.zeros(len(library)))

    @classmethod
    def from_expression(cls, text: str | sympy.Expr, name: str = "model") -> "SparseModel":
        """Split an expression into its additive terms, one library entry per term."""
        expr = parse_term(text) if isinstance(text, str) else sympy.sympify(text)
        expr = sympy.expand(expr)
        parts = expr.as_coefficients_dict()
        ordered = sorted(parts.items(), key=lambda item: sympy.default_sort_key(item[0]))
        terms = []
        coefficients = []
        for term, coeff in ordered:
            if coeff == 0:
                continue
            terms.append(LibraryTerm.from_expression(term))
            coefficients.append(float(coeff))
        return cls(FunctionLibrary(tuple(terms), name=name), np.array(coefficients))

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.coefficients != 0.0))

    @property
    def is_empty(self) -> bool:
        return not self.support

    def __call__(self, x) -> np.ndarray:
        return self.derivative(x, 0)

    def derivative(self, x, order: int = 0) -> np.ndarray:
        if order > _MAX_DERIVATIVE_ORDER or order < 0:
            raise UnsupportedModelError(f"Derivative order {order} is not supported (0, 1 or 2)")
        x_arr = np.asarray(x, dtype=np.float64)
        out = np.zeros(x_arr.shape, dtype=np.float64)
        for idx in self.support:
            out = out + self.coefficients[idx] * self.library.terms[idx].derivative(x_arr, order)
        return out

    def check_differentiable(self) -> None:
        for idx in self.support:
            term = self.library.terms[idx]
            if not term.differentiable:
                raise UnsupportedModelError(f"Term '{term.name}' has no registered derivative")

    def power_coefficients(self) -> np.ndarray | None:
        """Ascending power-basis coefficients, or None when a term is not polynomial."""
        total = np.zeros(1, dtype=np.float64)
        for idx in self.support:
            term_coeffs = self.library.terms[idx].power_coefficients()
            if term_coeffs is None:
                return None
            if term_coeffs.size > total.size:
                total = np.pad(total, (0, term_coeffs.size - total.size))
            total[: term_coeffs.size] += self.coefficients[idx] * term_coeffs
        return total

    def expression(self) -> sympy.Expr:
        out = sympy.Integer(0)
        for idx in self.support:
            term = self.library.terms[idx]
            if term.expr is None:
                out += sympy.Float(self.coefficients[idx]) * sympy.Function(term.name)(X)
            else:
                out += sympy.Float(self.coefficients[idx]) * term.expr
        return out

    def describe(self, precision: int = 6) -> str:
        if self.is_empty:
            return "0"
        parts = []
        for idx in self.support:
            coeff = self.coefficients[idx]
            name = self.library.terms[idx].name
            value = f"{coeff:.{precision}g}"
            parts.append(value if name == "1" else f"{value}*{name}")
        return " + ".join(parts).replace("+ -", "- ")

    def block(self, names: Sequence[str]) -> dict[str, float]:
        lookup = dict(zip(self.library.names, self.coefficients))
        return {name: float(lookup.get(name, 0.0)) for name in names}

    def to_json(self) -> dict:
        return {
            "library": self.library.names,
            "coefficients": [float(c) for c in self.coefficients],
            "support": list(self.support),
        }

    @classmethod
    def from_json(cls, payload: dict, name: str = "model") -> "SparseModel":
        try:
            names = payload["library"]
            coefficients = payload["coefficients"]
        except KeyError as exc:
            raise InvalidArgumentError(f"Model JSON is missing key {exc}") from exc
        model = cls(FunctionLibrary.from_names(names, name=name), np.asarray(coefficients, dtype=np.float64))
        support = payload.get("support")
        if support is not None and tuple(int(i) for i in support) != model.support:
            raise InvalidArgumentError("Model JSON support does not match its nonzero coefficients")
        return model
