"""Exact simulation of small qubit registers.

Statevector evolution for pure states, density matrices for depolarizing
noise, Born-rule shot sampling, and readout error injection/mitigation.

Conventions, used everywhere downstream:
  * qubit 0 is the least-significant bit of the basis index;
  * bitstring keys read z_{q-1} ... z_0, i.e. format(index, "0{q}b");
  * all operations are pure functions; states are immutable after
    construction, so parallel callers only need to partition seeds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

GATE_KINDS = ("H", "X", "Z", "RY", "RZ", "RZZ", "CX", "CZ")
_PARAMETRIC = ("RY", "RZ", "RZZ")
_TWO_QUBIT = ("RZZ", "CX", "CZ")

_SQ2 = 1.0 / math.sqrt(2.0)
_X = np.array([[0, 1], [1, 0]], dtype=complex)
_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
_Z = np.array([[1, 0], [0, -1]], dtype=complex)
_H = np.array([[_SQ2, _SQ2], [_SQ2, -_SQ2]], dtype=complex)


def bitstring(index: int, num_qubits: int) -> str:
    return format(index, f"0{num_qubits}b")


def bit_index(bits: str) -> int:
    return int(bits, 2)


@dataclass(frozen=True)
class GateOp:
    kind: str
    targets: Tuple[int, ...]
    angle: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        if self.kind not in GATE_KINDS:
            raise ValueError(f"unknown gate kind {self.kind!r}")
        want = 2 if self.kind in _TWO_QUBIT else 1
        if len(self.targets) != want:
            raise ValueError(f"{self.kind} takes {want} target(s), got {self.targets}")
        if len(set(self.targets)) != len(self.targets):
            raise ValueError(f"duplicate targets in {self.targets}")
        if any(t < 0 for t in self.targets):
            raise ValueError(f"negative qubit index in {self.targets}")
        if self.kind in _PARAMETRIC:
            if self.angle is None:
                raise ValueError(f"{self.kind} requires an angle")
        elif self.angle is not None:
            raise ValueError(f"{self.kind} takes no angle")


@dataclass(frozen=True)
class CircuitProgram:
    num_qubits: int
    ops: Tuple[GateOp, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        if not (1 <= self.num_qubits <= 8):
            raise ValueError("num_qubits must be in [1, 8]")
        for op in self.ops:
            if max(op.targets) >= self.num_qubits:
                raise ValueError(f"gate {op.kind} targets {op.targets} out of range")

    def extended(self, more: Iterable[GateOp]) -> "CircuitProgram":
        return CircuitProgram(self.num_qubits, self.ops + tuple(more))


def gate_matrix(op: GateOp) -> np.ndarray:
    """Dense unitary for one gate: 2x2, or 4x4 in the (targets[0], targets[1])
    basis with targets[0] as the high bit."""
    k = op.kind
    if k == "H":
        return _H.copy()
    if k == "X":
        return _X.copy()
    if k == "Z":
        return _Z.copy()
    if k == "RY":
        c, s = math.cos(op.angle / 2), math.sin(op.angle / 2)
        return np.array([[c, -s], [s, c]], dtype=complex)
    if k == "RZ":
        return np.diag([np.exp(-0.5j * op.angle), np.exp(0.5j * op.angle)])
    if k == "RZZ":
        # phase exp(-i*angle/2 * (-1)^(za xor zb))
        e0, e1 = np.exp(-0.5j * op.angle), np.exp(0.5j * op.angle)
        return np.diag([e0, e1, e1, e0])
    if k == "CX":
        return np.array(
            [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex
        )
    if k == "CZ":
        return np.diag([1, 1, 1, -1]).astype(complex)
    raise ValueError(k)


def _apply_1q(u: np.ndarray, arr: np.ndarray, target: int, num_qubits: int) -> np.ndarray:
    """Apply a 2x2 matrix on `target` along axis 0 of arr (dim 2^q first)."""
    tail = arr.shape[1:]
    a = arr.reshape(1 << (num_qubits - 1 - target), 2, -1)
    out = np.empty_like(a)
    out[:, 0] = u[0, 0] * a[:, 0] + u[0, 1] * a[:, 1]
    out[:, 1] = u[1, 0] * a[:, 0] + u[1, 1] * a[:, 1]
    return out.reshape((1 << num_qubits,) + tail)


def _apply_2q(u: np.ndarray, arr: np.ndarray, ta: int, tb: int, num_qubits: int) -> np.ndarray:
    """Apply a 4x4 matrix on qubits (ta, tb), ta the high bit of its basis."""
    dim = 1 << num_qubits
    idx = np.arange(dim)
    pair_mask = (1 << ta) | (1 << tb)
    base = idx[(idx & pair_mask) == 0]
    rows = np.stack(
        [base, base + (1 << tb), base + (1 << ta), base + pair_mask]
    )
    sub = arr[rows]  # (4, dim/4, tail...)
    mixed = np.tensordot(u, sub, axes=(1, 0))
    out = np.empty_like(arr)
    out[rows] = mixed
    return out


def _apply_op(arr: np.ndarray, op: GateOp, num_qubits: int) -> np.ndarray:
    u = gate_matrix(op)
    if len(op.targets) == 1:
        return _apply_1q(u, arr, op.targets[0], num_qubits)
    return _apply_2q(u, arr, op.targets[0], op.targets[1], num_qubits)


@dataclass(frozen=True)
class PureState:
    num_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex).reshape(-1).copy()
        if amps.size != 1 << self.num_qubits:
            raise ValueError(
                f"expected {1 << self.num_qubits} amplitudes, got {amps.size}"
            )
        norm = float(np.sum(np.abs(amps) ** 2))
        if abs(norm - 1.0) > 1e-10:
            raise ValueError(f"state norm^2 = {norm}, not 1 within 1e-10")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2


def zero_state(num_qubits: int) -> PureState:
    amps = np.zeros(1 << num_qubits, dtype=complex)
    amps[0] = 1.0
    return PureState(num_qubits, amps)


@dataclass(frozen=True)
class DensityState:
    num_qubits: int
    matrix: np.ndarray

    def __post_init__(self):
        dim = 1 << self.num_qubits
        rho = np.asarray(self.matrix, dtype=complex).copy()
        if rho.shape != (dim, dim):
            raise ValueError(f"expected {dim}x{dim} matrix, got {rho.shape}")
        if np.max(np.abs(rho - rho.conj().T)) > 1e-10:
            raise ValueError("density matrix is not Hermitian within 1e-10")
        tr = complex(np.trace(rho)).real
        if abs(tr - 1.0) > 1e-10:
            raise ValueError(f"trace = {tr}, not 1 within 1e-10")
        if float(np.min(np.linalg.eigvalsh(rho))) < -1e-9:
            raise ValueError("density matrix has an eigenvalue below -1e-9")
        rho.setflags(write=False)
        object.__setattr__(self, "matrix", rho)

    def diagonal_probabilities(self) -> np.ndarray:
        p = np.real(np.diag(self.matrix)).copy()
        p[p < 0] = 0.0
        return p / p.sum()


def density_from_pure(state: PureState) -> DensityState:
    v = state.amplitudes
    return DensityState(state.num_qubits, np.outer(v, v.conj()))


@dataclass(frozen=True)
class NoiseSpec:
    depol_1q: float = 0.0
    depol_2q: float = 0.0
    readout_flip_01: object = 0.0  # scalar or per-qubit sequence, P(read 1 | true 0)
    readout_flip_10: object = 0.0  # scalar or per-qubit sequence, P(read 0 | true 1)

    def __post_init__(self):
        for p in (self.depol_1q, self.depol_2q):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"depolarizing probability {p} outside [0, 1]")
        for v in (self.readout_flip_01, self.readout_flip_10):
            arr = np.atleast_1d(np.asarray(v, dtype=float))
            if np.any(arr < 0) or np.any(arr > 1):
                raise ValueError(f"readout flip probability {v} outside [0, 1]")

    def flips_for(self, num_qubits: int) -> Tuple[np.ndarray, np.ndarray]:
        p01 = np.broadcast_to(
            np.atleast_1d(np.asarray(self.readout_flip_01, dtype=float)), (num_qubits,)
        ).copy()
        p10 = np.broadcast_to(
            np.atleast_1d(np.asarray(self.readout_flip_10, dtype=float)), (num_qubits,)
        ).copy()
        return p01, p10

    @property
    def any_readout(self) -> bool:
        return bool(
            np.any(np.asarray(self.readout_flip_01, dtype=float) > 0)
            or np.any(np.asarray(self.readout_flip_10, dtype=float) > 0)
        )


@dataclass(frozen=True)
class ShotResult:
    counts: Dict[str, int]
    shots: int

    def __post_init__(self):
        total = sum(self.counts.values())
        if total != self.shots:
            raise ValueError(f"counts sum to {total}, declared shots {self.shots}")
        widths = {len(k) for k in self.counts}
        if len(widths) > 1:
            raise ValueError("inconsistent bitstring lengths in counts")
        for k, v in self.counts.items():
            if v < 0 or set(k) - {"0", "1"}:
                raise ValueError(f"bad counts entry {k!r}: {v}")

    def frequency(self, bits: str) -> float:
        return self.counts.get(bits, 0) / self.shots


def apply_circuit(state: PureState, program: CircuitProgram) -> PureState:
    if state.num_qubits != program.num_qubits:
        raise ValueError("state/program qubit counts differ")
    amps = state.amplitudes.copy()
    for op in program.ops:
        amps = _apply_op(amps, op, program.num_qubits)
    return PureState(program.num_qubits, amps)


def expectation_pauli_z(state: PureState, qubits: Sequence[int]) -> float:
    qubits = sorted(set(int(t) for t in qubits))
    if not qubits:
        raise ValueError("empty qubit set")
    if qubits[-1] >= state.num_qubits or qubits[0] < 0:
        raise ValueError(f"qubit set {qubits} out of range")
    dim = 1 << state.num_qubits
    idx = np.arange(dim)
    parity = np.zeros(dim, dtype=np.int64)
    for t in qubits:
        parity ^= (idx >> t) & 1
    signs = 1.0 - 2.0 * parity
    return float(np.dot(signs, state.probabilities()))


def expectation_pauli_z_density(state: DensityState, qubits: Sequence[int]) -> float:
    qubits = sorted(set(int(t) for t in qubits))
    if not qubits:
        raise ValueError("empty qubit set")
    dim = 1 << state.num_qubits
    idx = np.arange(dim)
    parity = np.zeros(dim, dtype=np.int64)
    for t in qubits:
        parity ^= (idx >> t) & 1
    signs = 1.0 - 2.0 * parity
    return float(np.dot(signs, np.real(np.diag(state.matrix))))


def _counts_from_draws(draws: np.ndarray, num_qubits: int, shots: int) -> ShotResult:
    values, reps = np.unique(draws, return_counts=True)
    counts = {bitstring(int(v), num_qubits): int(c) for v, c in zip(values, reps)}
    return ShotResult(counts, shots)


def sample_shots(state: PureState, shots: int, seed: int) -> ShotResult:
    if shots < 1:
        raise ValueError("shots must be >= 1")
    rng = np.random.default_rng(seed)
    probs = state.probabilities()
    probs = probs / probs.sum()
    reps = rng.multinomial(shots, probs)
    counts = {
        bitstring(i, state.num_qubits): int(c) for i, c in enumerate(reps) if c > 0
    }
    return ShotResult(counts, shots)


def sample_shots_density(state: DensityState, shots: int, seed: int) -> ShotResult:
    if shots < 1:
        raise ValueError("shots must be >= 1")
    rng = np.random.default_rng(seed)
    reps = rng.multinomial(shots, state.diagonal_probabilities())
    counts = {
        bitstring(i, state.num_qubits): int(c) for i, c in enumerate(reps) if c > 0
    }
    return ShotResult(counts, shots)


def required_shots(epsilon: float, delta: float) -> int:
    """Hoeffding shot budget: ceil(ln(2/delta) / (2 eps^2)) for +-1 outcomes."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    return max(1, math.ceil(math.log(2.0 / delta) / (2.0 * epsilon * epsilon)))


def _conjugate(arr, op: GateOp, num_qubits: int) -> np.ndarray:
    """rho -> U rho U_dagger using the statevector kernels on columns."""
    a = _apply_op(arr, op, num_qubits)  # U rho
    b = _apply_op(a.conj().T.copy(), op, num_qubits)  # U (U rho)^dagger
    return b.conj().T


def _depolarize(rho: np.ndarray, target: int, p: float, num_qubits: int) -> np.ndarray:
    if p == 0.0:
        return rho
    mix = np.zeros_like(rho)
    for pauli in (_X, _Y, _Z):
        a = _apply_1q(pauli, rho, target, num_qubits)
        b = _apply_1q(pauli, a.conj().T.copy(), target, num_qubits)
        mix += b.conj().T
    return (1.0 - p) * rho + (p / 3.0) * mix


def apply_circuit_noisy(
    state: DensityState, program: CircuitProgram, noise: NoiseSpec
) -> DensityState:
    """Unitary evolution with a depolarizing channel after every gate.

    Two-qubit gates are followed by independent single-qubit channels at
    rate depol_2q on each target.
    """
    if state.num_qubits != program.num_qubits:
        raise ValueError("state/program qubit counts differ")
    rho = state.matrix.copy()
    q = program.num_qubits
    for op in program.ops:
        rho = _conjugate(rho, op, q)
        p = noise.depol_1q if len(op.targets) == 1 else noise.depol_2q
        for t in op.targets:
            rho = _depolarize(rho, t, p, q)
    return DensityState(q, rho)


def partial_trace(state: DensityState, keep: Sequence[int]) -> DensityState:
    """Reduced state over `keep`. Kept qubits preserve their relative order:
    the highest kept index stays the most-significant bit."""
    keep = sorted(set(int(t) for t in keep))
    if not keep:
        raise ValueError("keep set must be nonempty")
    q = state.num_qubits
    if keep[0] < 0 or keep[-1] >= q:
        raise ValueError(f"keep set {keep} out of range")
    arr = state.matrix.reshape([2] * (2 * q))
    # axis i is row bit of qubit q-1-i; axis q+i the matching column bit
    letters = "abcdefghijklmnop"
    row = list(letters[:q])
    col = list(letters[q : 2 * q])
    for t in range(q):
        if t not in keep:
            col[q - 1 - t] = row[q - 1 - t]
    out_axes = [row[q - 1 - t] for t in reversed(keep)] + [
        col[q - 1 - t] for t in reversed(keep)
    ]
    sub = "".join(row) + "".join(col) + "->" + "".join(out_axes)
    k = len(keep)
    reduced = np.einsum(sub, arr).reshape(1 << k, 1 << k)
    return DensityState(k, reduced)


def is_separable_two_qubit(state: PureState) -> Tuple[bool, float]:
    """Product-state test on 2 qubits via |a00*a11 - a01*a10|."""
    if state.num_qubits != 2:
        raise ValueError("separability test defined for exactly 2 qubits")
    a = state.amplitudes
    det = abs(a[0] * a[3] - a[1] * a[2])
    return det <= 1e-10, float(det)


def apply_readout_error(result: ShotResult, noise: NoiseSpec, seed: int) -> ShotResult:
    """Flip each measured bit independently with its asymmetric probability."""
    if not result.counts:
        return result
    q = len(next(iter(result.counts)))
    p01, p10 = noise.flips_for(q)
    rng = np.random.default_rng(seed)
    out_draws = []
    for bits in sorted(result.counts):
        c = result.counts[bits]
        value = bit_index(bits)
        # bit j of `value` is qubit j; flip with p01 when 0, p10 when 1
        bitmat = (value >> np.arange(q)) & 1  # (q,)
        flip_p = np.where(bitmat == 1, p10, p01)
        flips = rng.random((c, q)) < flip_p
        flipped = np.bitwise_xor(bitmat, flips.astype(np.int64))
        out_draws.append(flipped @ (1 << np.arange(q)))
    draws = np.concatenate(out_draws)
    return _counts_from_draws(draws, q, result.shots)


def confusion_matrix_1q(p01: float, p10: float) -> np.ndarray:
    """Column = true bit, row = measured bit."""
    return np.array([[1.0 - p01, p10], [p01, 1.0 - p10]])


def mitigate_readout(result: ShotResult, noise: NoiseSpec) -> Dict[str, float]:
    """Invert the tensor-product readout confusion matrix on empirical
    frequencies, then clamp to [0, 1] and renormalize.

    Raises on a singular per-qubit confusion matrix (p01 + p10 = 1).
    """
    if not result.counts:
        raise ValueError("empty counts")
    q = len(next(iter(result.counts)))
    return mitigate_frequencies(
        {bits: c / result.shots for bits, c in result.counts.items()}, noise, q
    )


def mitigate_frequencies(
    frequencies: Dict[str, float], noise: NoiseSpec, num_qubits: int
) -> Dict[str, float]:
    """Same inversion on an arbitrary outcome distribution.

    Applied to an analytically corrupted exact distribution this recovers
    the original to numerical precision; on finite-shot frequencies it
    returns the clamped-and-renormalized quasi-distribution.
    """
    q = num_qubits
    p01, p10 = noise.flips_for(q)
    dim = 1 << q
    freq = np.zeros(dim)
    for bits, c in frequencies.items():
        freq[bit_index(bits)] = c
    for j in range(q):
        det = 1.0 - p01[j] - p10[j]
        if abs(det) < 1e-12:
            raise ValueError(
                f"qubit {j} confusion matrix singular (p01 + p10 = 1)"
            )
        inv = np.linalg.inv(confusion_matrix_1q(p01[j], p10[j]))
        freq = _apply_1q(inv, freq, j, q)
    freq = np.clip(freq, 0.0, 1.0)
    freq = freq / freq.sum()
    return {bitstring(i, q): float(v) for i, v in enumerate(freq)}


def corrupt_frequencies(
    frequencies: Dict[str, float], noise: NoiseSpec, num_qubits: int
) -> Dict[str, float]:
    """Forward application of the tensor-product readout confusion model."""
    q = num_qubits
    p01, p10 = noise.flips_for(q)
    freq = np.zeros(1 << q)
    for bits, c in frequencies.items():
        freq[bit_index(bits)] = c
    for j in range(q):
        freq = _apply_1q(confusion_matrix_1q(p01[j], p10[j]), freq, j, q)
    return {bitstring(i, q): float(v) for i, v in enumerate(freq)}


def circuit_depth(program: CircuitProgram) -> int:
    """Greedy ASAP layering depth."""
    level = [0] * program.num_qubits
    depth = 0
    for op in program.ops:
        layer = 1 + max(level[t] for t in op.targets)
        for t in op.targets:
            level[t] = layer
        depth = max(depth, layer)
    return depth


def gate_counts(program: CircuitProgram) -> Dict[str, int]:
    out: Dict[str, int] = {}
    for op in program.ops:
        out[op.kind] = out.get(op.kind, 0) + 1
    return out
