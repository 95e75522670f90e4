import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from dotenv import load_dotenv

load_dotenv()

HW_LOG_LEVEL = os.getenv('HW_LOG_LEVEL', 'INFO')
HW_LOG_FILE = os.getenv('HW_LOG_FILE', '')

# Solver defaults - explicit SolverConfig arguments override these
DEFAULT_SOLVER_SETTINGS = {
    'tol_rel': float(os.getenv('HW_TOL_REL', '1e-10')),
    'tol_abs': None,  # None -> 1e-12 * mu * mesh scale
    'max_iter': int(os.getenv('HW_MAX_ITER', '50')),
    'backtrack': 0.5,
    'sufficient_decrease': 1e-4,
    'max_backtracks': 30,
    'mode': 'monolithic',
    'harmonic_lift': True,
    'kkt_solver': os.getenv('HW_KKT_SOLVER', 'eliminate'),
    'max_load_cuts': int(os.getenv('HW_MAX_LOAD_CUTS', '6')),
}

DEFAULT_FRAMES_SETTINGS = {
    'dim': 2,
    'div': 16,
    'refine': 0,
    'tol': 1e-6,
    'out_prefix': 'frames',
}

MATERIALS = ('svk', 'neohookean')
SOLVE_MODES = ('monolithic', 'condensed')


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        where = f"line {line}: " if line is not None else ""
        name = f"'{key}': " if key else ""
        super().__init__(f"{where}{name}{message}")
        self.detail = message
        self.key = key
        self.line = line


@dataclass
class DirichletSpec:
    """x -> A x + b imposed on the vertices of the listed markers ('all' = whole boundary)."""
    markers: Tuple[int, ...]
    matrix: np.ndarray
    offset: np.ndarray
    everywhere: bool = False

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.matrix.T + self.offset


@dataclass
class RunConfig:
    kind: str
    values: Dict[str, Any]
    lines: Dict[str, int] = field(default_factory=dict)
    source: str = ""

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)


# ---------------------------------------------------------------- value parsers

def _floats(text: str, key: str) -> List[float]:
    try:
        return [float(t) for t in text.split(',') if t.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got '{text}'", key)


def _positive_float(text: str, key: str, dim: int) -> float:
    value = _floats(text, key)
    if len(value) != 1 or not value[0] > 0:
        raise ConfigError(f"expected a positive number, got '{text}'", key)
    return value[0]


def _float(text: str, key: str, dim: int) -> float:
    value = _floats(text, key)
    if len(value) != 1:
        raise ConfigError(f"expected a single number, got '{text}'", key)
    return value[0]


def _int_at_least(minimum: int) -> Callable:
    def parse(text: str, key: str, dim: int) -> int:
        try:
            value = int(text)
        except ValueError:
            raise ConfigError(f"expected an integer, got '{text}'", key)
        if value < minimum:
            raise ConfigError(f"must be >= {minimum}, got {value}", key)
        return value
    return parse


def _choice(options: Tuple[str, ...]) -> Callable:
    def parse(text: str, key: str, dim: int) -> str:
        value = text.strip().lower()
        if value not in options:
            raise ConfigError(f"expected one of {list(options)}, got '{text}'", key)
        return value
    return parse


def _dim(text: str, key: str, dim: int) -> int:
    value = _int_at_least(2)(text, key, dim)
    if value not in (2, 3):
        raise ConfigError(f"dimension must be 2 or 3, got {value}", key)
    return value


def _string(text: str, key: str, dim: int) -> str:
    if not text:
        raise ConfigError("empty value", key)
    return text


def parse_divisions(text: str, key: str = 'div', dim: Optional[int] = None) -> Tuple[int, ...]:
    try:
        divisions = tuple(int(t) for t in text.lower().split('x'))
    except ValueError:
        raise ConfigError(f"expected divisions like 8x8, got '{text}'", key)
    if min(divisions) < 1:
        raise ConfigError(f"divisions must be >= 1, got '{text}'", key)
    if dim is not None and len(divisions) != dim:
        raise ConfigError(f"expected {dim} divisions, got '{text}'", key)
    return divisions


def _mesh(text: str, key: str, dim: int):
    if text.startswith('box:'):
        return ('box', parse_divisions(text[4:], key, dim))
    return ('file', _string(text, key, dim))


def _vector(text: str, key: str, dim: int) -> np.ndarray:
    values = _floats(text, key)
    if len(values) != dim:
        raise ConfigError(f"expected {dim} components, got {len(values)}", key)
    return np.array(values)


def _dirichlet(text: str, key: str, dim: int) -> List[DirichletSpec]:
    specs = []
    for chunk in filter(None, (c.strip() for c in text.split(';'))):
        if ':' not in chunk or '|' not in chunk:
            raise ConfigError(f"expected 'MARKERS:a11,...|b1,...', got '{chunk}'", key)
        marker_text, affine = chunk.split(':', 1)
        matrix_text, offset_text = affine.split('|', 1)
        everywhere = marker_text.strip().lower() == 'all'
        markers: Tuple[int, ...] = ()
        if not everywhere:
            try:
                markers = tuple(int(m) for m in marker_text.split('+'))
            except ValueError:
                raise ConfigError(f"bad marker list '{marker_text}'", key)
        matrix = _floats(matrix_text, key)
        if len(matrix) != dim * dim:
            raise ConfigError(f"affine matrix needs {dim * dim} entries, got {len(matrix)}", key)
        specs.append(DirichletSpec(markers, np.array(matrix).reshape(dim, dim),
                                   _vector(offset_text, key, dim), everywhere))
    if not specs:
        raise ConfigError("no Dirichlet data given", key)
    return specs


def _neumann(text: str, key: str, dim: int) -> Dict[int, np.ndarray]:
    loads: Dict[int, np.ndarray] = {}
    for chunk in filter(None, (c.strip() for c in text.split(';'))):
        if ':' not in chunk:
            raise ConfigError(f"expected 'MARKER:t1,...', got '{chunk}'", key)
        marker_text, vector_text = chunk.split(':', 1)
        try:
            marker = int(marker_text)
        except ValueError:
            raise ConfigError(f"bad marker '{marker_text}'", key)
        if marker in loads:
            raise ConfigError(f"marker {marker} given twice", key)
        loads[marker] = _vector(vector_text, key, dim)
    return loads


# key -> (parser, required); parsed in this order so 'dim' is known first
SOLVE_SCHEMA: Dict[str, Tuple[Callable, bool]] = {
    'dim': (_dim, True),
    'mesh': (_mesh, True),
    'material': (_choice(MATERIALS), True),
    'lambda': (_float, False),
    'mu': (_positive_float, False),
    'young': (_positive_float, False),
    'poisson': (_float, False),
    'mode': (_choice(SOLVE_MODES), True),
    'tol_rel': (_positive_float, True),
    'tol_abs': (_positive_float, False),
    'max_iter': (_int_at_least(1), True),
    'dirichlet': (_dirichlet, True),
    'neumann': (_neumann, False),
    'body_force': (_vector, False),
    'out_prefix': (_string, True),
}

FRAMES_SCHEMA: Dict[str, Tuple[Callable, bool]] = {
    'dim': (_dim, False),
    'field': (_string, True),
    'div': (_int_at_least(4), False),
    'refine': (_int_at_least(0), False),
    'tol': (_positive_float, False),
    'out_prefix': (_string, False),
}

SCHEMAS = {'solve': SOLVE_SCHEMA, 'frames': FRAMES_SCHEMA}


def read_key_values(path: str) -> Dict[str, Tuple[str, int]]:
    """Raw `key = value` pairs with their 1-based line numbers."""
    raw: Dict[str, Tuple[str, int]] = {}
    try:
        with open(path, 'r') as f:
            content = f.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}")
    for number, line in enumerate(content, start=1):
        text = line.split('#', 1)[0].strip()
        if not text:
            continue
        if '=' not in text:
            raise ConfigError(f"expected 'key = value', got '{text}'", line=number)
        key, value = (part.strip() for part in text.split('=', 1))
        key = key.lower()
        if key in raw:
            raise ConfigError(f"duplicate key (first on line {raw[key][1]})", key, number)
        raw[key] = (value, number)
    return raw


def _check_elastic_constants(values: Dict[str, Any], lines: Dict[str, int]):
    """Exactly one of the pairs (lambda, mu) and (young, poisson) must be given."""
    lame = [k for k in ('lambda', 'mu') if k in values]
    engineering = [k for k in ('young', 'poisson') if k in values]
    if lame and engineering:
        key = engineering[0]
        raise ConfigError("give either lambda/mu or young/poisson, not both", key, lines[key])
    if engineering:
        for key in ('young', 'poisson'):
            if key not in values:
                raise ConfigError("missing required key", key)
        if not -1.0 < values['poisson'] < 0.5:
            raise ConfigError(f"must lie in (-1, 0.5), got {values['poisson']}", 'poisson', lines['poisson'])
        return
    for key in ('lambda', 'mu'):
        if key not in values:
            raise ConfigError("missing required key", key)
    dim = values['dim']
    if values['lambda'] + 2.0 * values['mu'] / dim <= 0:
        raise ConfigError(f"lambda + 2 mu / {dim} must be positive", 'lambda', lines['lambda'])


def load_run_config(path: str, kind: str = 'solve') -> RunConfig:
    if kind not in SCHEMAS:
        raise ValueError(f"Unknown config kind '{kind}'")
    schema = SCHEMAS[kind]
    raw = read_key_values(path)
    for key, (_, number) in raw.items():
        if key not in schema:
            raise ConfigError("unknown key", key, number)
    for key, (_, required) in schema.items():
        if required and key not in raw:
            raise ConfigError("missing required key", key)

    values: Dict[str, Any] = dict(DEFAULT_FRAMES_SETTINGS) if kind == 'frames' else {}
    lines: Dict[str, int] = {}
    for key, (parser, _) in schema.items():
        if key not in raw:
            continue
        text, number = raw[key]
        try:
            values[key] = parser(text, key, values.get('dim', 2))
        except ConfigError as e:
            raise ConfigError(e.detail, key, number)
        lines[key] = number

    if kind == 'solve':
        _check_elastic_constants(values, lines)
    return RunConfig(kind, values, lines, path)
