"""Stability operator, Gaussian/Q inner products, eigenbasis and splitting.

The stability operator is L = Lap - <x, grad . >/2 + |A|^2 + 1/2, symmetric
for the Gaussian weight exp(-|x|^2/4).  Eigenvalues follow the convention
L w = -mu w, so instability means mu < 0; the geometric eigenfunctions are
H (mu = -1), <v, n> for constant v (mu = -1/2) and <z, n> for rotation
generators z (mu = 0).

Eigenproblems are assembled in weak (variational) form so the discrete Q
Gram matrices are exactly symmetric positive definite; strong-form residuals
of the computed eigenpairs are reported per mode.  On a rot_surface the
operator splits into angular modes m; on a doubled cover each angular mode
is restricted to the parity subspace that descends to the surface.
"""

import dataclasses

import numpy as np
import scipy.linalg

from .errors import SpectralError, SpectralGapError
from .geometry import GraphFunction

DEFAULT_GAP_TOL = 1e-6


# ---------------------------------------------------------------------------
# strong-form operator
# ---------------------------------------------------------------------------


class OperatorL:
    """Dense strong-form stability operator, block-diagonal in angular mode."""

    def __init__(self, base):
        self.base = base
        drift = -0.5 * base.pos_tangent[:, 0]
        zeroth = np.diag(base.A2 + 0.5)
        core = base.D2 + np.diag(drift) @ base.D1 + zeroth
        if base.kind == "planar_curve":
            self.blocks = [core]
        else:
            r = base.profile[:, 0]
            core = core + np.diag(base.drds_over_r) @ base.D1
            self.blocks = [core - m * m * np.diag(1.0 / r ** 2)
                           for m in range(base.M + 2)]

    def apply_values(self, values):
        base = self.base
        if base.kind == "planar_curve":
            return values @ self.blocks[0].T
        stack = np.fft.rfft(values, axis=-2)
        if not hasattr(self, "_block_tensor"):
            self._block_tensor = np.ascontiguousarray(
                np.stack([b.T for b in self.blocks]))
        # batched GEMM over the angular-mode axis
        nm = len(self.blocks)
        moved = np.moveaxis(stack, -2, 0)          # (m, ..., j)
        lead = moved.shape[1:-1]
        flat = moved.reshape(nm, -1, base.N)
        out = np.matmul(flat, self._block_tensor)  # (m, batch, i)
        out = np.moveaxis(out.reshape((nm,) + lead + (base.N,)), 0, -2)
        return np.fft.irfft(out, n=base.n_theta, axis=-2)

    def __call__(self, u):
        return GraphFunction.from_values(self.base,
                                         self.apply_values(u.values))


def assemble_L(base):
    return OperatorL(base)


# ---------------------------------------------------------------------------
# Q form
# ---------------------------------------------------------------------------


class QForm:
    """Q(u,v) = int (Lambda u v - u L v) rho, assembled variationally.

    Also carries the Gaussian L^2 Gram, the measured equivalence constants
    against the Gaussian W^{1,2} Gram, and a bound constant against the
    discrete C^2-surrogate norm.
    """

    def __init__(self, base, lam):
        lam = float(lam)
        floor = float(base.A2.max()) + 1.5
        if lam <= floor:
            raise SpectralError(
                f"Lambda = {lam} rejected; needs Lambda > sup|A|^2 + 3/2 = {floor}")
        self.base = base
        self.lam = lam
        rho = base.gauss_weight
        if base.kind == "planar_curve":
            v = base.area_weight * rho
            modes = [0]
        else:
            v = base.area_weight * rho
            modes = list(range(base.M + 2))
        self._vrho = v
        K0 = base.D1.T @ np.diag(v) @ base.D1
        self.gauss_gram = []
        self.q_gram = []
        self.w12_gram = []
        r2 = None if base.kind == "planar_curve" else base.profile[:, 0] ** 2
        for m in modes:
            B = np.diag(v)
            K = K0.copy()
            if m:
                K += np.diag(v * m * m / r2)
            GQ = K + np.diag(v * (lam - base.A2 - 0.5))
            self.gauss_gram.append(B)
            self.q_gram.append(0.5 * (GQ + GQ.T))
            self.w12_gram.append(K + B)
        ev = []
        for GQ, GW in zip(self.q_gram, self.w12_gram):
            vals = scipy.linalg.eigh(GQ, GW, eigvals_only=True)
            ev.extend([vals[0], vals[-1]])
            if vals[0] <= 0:
                raise SpectralError("Q form lost positive definiteness")
        self.c1 = float(np.sqrt(min(ev)))
        self.c2 = float(np.sqrt(max(ev)))
        vol = float(v.sum())
        self.C_Q = float(np.sqrt((lam + 1.0) * vol))

    # weights on the values grid, including the Gaussian factor
    def _grid_vrho(self):
        base = self.base
        w = base.grid_weights() * base.gauss_weight[None, :] \
            if base.kind == "rot_surface" else base.area_weight * base.gauss_weight
        return w

    def gauss_inner(self, u, v):
        uu = u.values if isinstance(u, GraphFunction) else u
        vv = v.values if isinstance(v, GraphFunction) else v
        return float((self._grid_vrho() * uu * vv).sum())

    def gauss_norm(self, u):
        return float(np.sqrt(max(self.gauss_inner(u, u), 0.0)))

    def _grad_values(self, u):
        base = self.base
        uu = u.values if isinstance(u, GraphFunction) else u
        gs = base.field_ds(uu)
        if base.kind == "planar_curve":
            return (gs,)
        gt = base.field_dtheta(uu) / base.profile[:, 0][None, :]
        return (gs, gt)

    def inner(self, u, v):
        """Q(u, v) through the weak form (exactly symmetric)."""
        base = self.base
        uu = u.values if isinstance(u, GraphFunction) else u
        vv = v.values if isinstance(v, GraphFunction) else v
        w = self._grid_vrho()
        gu = self._grad_values(u)
        gv = self._grad_values(v)
        zeroth = self.lam - base.A2 - 0.5
        z = zeroth if base.kind == "planar_curve" else zeroth[None, :]
        out = (w * (uu * vv * z + sum(a * b for a, b in zip(gu, gv)))).sum()
        return float(out)

    def norm(self, u):
        return float(np.sqrt(max(self.inner(u, u), 0.0)))

    def w12_norm(self, u):
        uu = u.values if isinstance(u, GraphFunction) else u
        w = self._grid_vrho()
        gu = self._grad_values(u)
        return float(np.sqrt((w * (uu ** 2 + sum(a * a for a in gu))).sum()))


def assemble_Q(base, lam=None):
    if lam is None:
        lam = float(base.A2.max()) + 1.6
    return QForm(base, lam)


# ---------------------------------------------------------------------------
# eigensolve
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class EigenMode:
    mu: float
    m: int                  # angular mode; 0 for planar curves
    phase: str              # "", "cos" or "sin"
    fn: GraphFunction       # Q-normalized eigenfunction
    residual: float         # strong-form relative residual
    tag: str = ""


@dataclasses.dataclass
class Spectrum:
    base: object
    qform: QForm
    modes: list

    def mus(self):
        return np.array([m.mu for m in self.modes])


def _parity_basis(N, sign):
    """Orthonormal basis of grid functions with f(N-1-i) = sign * f(i)."""
    half = N // 2
    R = np.zeros((N, half))
    inv = 1.0 / np.sqrt(2.0)
    for i in range(half):
        R[i, i] = inv
        R[N - 1 - i, i] = sign * inv
    return R


def _complement_basis(c):
    """Orthonormal basis of the complement of a unit vector, via Householder."""
    n = c.size
    v = c.copy()
    v[-1] += np.sign(c[-1]) if c[-1] != 0 else 1.0
    v /= np.linalg.norm(v)
    H = np.eye(n) - 2.0 * np.outer(v, v)
    return H[:, :-1]


def _profile_eigensolve(base, qform, m, strong_block=None):
    """Eigensolve of one angular block.

    Single-cover bases use the weak (variational) form: exactly symmetric,
    with the Nyquist sawtooth (null vector of the odd spectral derivative)
    deflated from the trial space.  Doubled covers use the strong collocation
    block restricted to the parity subspace: the |r| kink of the folded
    measure would cost the Galerkin form its spectral accuracy at the poles.
    """
    if base.kind == "rot_surface" and base.doubled:
        R = _parity_basis(base.N, 1.0 if m % 2 == 0 else -1.0)
        Ar = R.T @ strong_block @ R
        ev, vec = scipy.linalg.eig(Ar)
        if np.abs(ev.imag).max() > 1e-8:
            raise SpectralError("complex eigenvalue in a symmetric block")
        mu = -ev.real
        order = np.argsort(mu)
        return mu[order], R @ vec.real[:, order]
    v = qform._vrho
    B = np.diag(v)
    A = base.D1.T @ B @ base.D1
    if m:
        A = A + np.diag(v * m * m / base.profile[:, 0] ** 2)
    A = A - np.diag(v * (base.A2 + 0.5))
    A = 0.5 * (A + A.T)
    saw = np.cos(np.pi * np.arange(base.N)) / np.sqrt(base.N)
    P = _complement_basis(saw)
    A = P.T @ A @ P
    B = P.T @ B @ P
    mu, vec = scipy.linalg.eigh(0.5 * (A + A.T), 0.5 * (B + B.T))
    return mu, P @ vec


def _strong_residual(base, op, m, mu, f):
    Lf = op.blocks[m if base.kind == "rot_surface" else 0] @ f
    w = base.area_weight * base.gauss_weight
    num = np.sqrt((w * (Lf + mu * f) ** 2).sum())
    den = np.sqrt((w * f ** 2).sum())
    return float(num / den)


def _mode_graph(base, m, phase, f):
    if base.kind == "planar_curve":
        return GraphFunction.from_values(base, f)
    if m == 0:
        vals = np.broadcast_to(f[None, :], (base.n_theta, base.N)).copy()
    elif phase == "cos":
        vals = np.cos(m * base.theta)[:, None] * f[None, :]
    else:
        vals = np.sin(m * base.theta)[:, None] * f[None, :]
    return GraphFunction.from_values(base, vals)


def geometric_candidates(base):
    """Normal components of the dilation, translation and rotation fields."""
    out = {}
    if base.kind == "planar_curve":
        out["dilation"] = GraphFunction.from_values(base, 2.0 * base.H)
        for j, lab in enumerate("xy"):
            out[f"translation_{lab}"] = GraphFunction.from_values(
                base, base.normal2d[:, j])
        J = np.array([[0.0, -1.0], [1.0, 0.0]])
        rot = np.einsum("ij,ij->i", base.profile @ J.T, base.normal2d)
        out["rotation_z"] = GraphFunction.from_values(base, rot)
        return out
    out["dilation"] = GraphFunction.from_values(
        base, np.broadcast_to(2.0 * base.H[None, :],
                              (base.n_theta, base.N)).copy())
    nr = base.n3d
    for j, lab in enumerate("xyz"):
        out[f"translation_{lab}"] = GraphFunction.from_values(
            base, nr[..., j].copy())
    gens = {"rotation_x": np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]], float),
            "rotation_y": np.array([[0, 0, 1], [0, 0, 0], [-1, 0, 0]], float),
            "rotation_z": np.array([[0, -1, 0], [1, 0, 0], [0, 0, 0]], float)}
    for lab, Z in gens.items():
        fld = np.einsum("tnc,tnc->tn", base.x3d @ Z.T, base.n3d)
        out[lab] = GraphFunction.from_values(base, fld)
    return out


def _tag_modes(spectrum):
    """Mark eigenfunctions overlapping > 0.99 with a geometric field."""
    q = spectrum.qform
    cands = []
    for name, g in geometric_candidates(spectrum.base).items():
        nrm = q.norm(g)
        if nrm > 1e-8:
            cands.append((name, (1.0 / nrm) * g))
    for mode in spectrum.modes:
        for name, g in cands:
            if abs(q.inner(mode.fn, g)) > 0.99:
                mode.tag = name.split("_")[0]
                break
        if not mode.tag and mode.mu < -1.0 - 1e-6:
            mode.tag = "unstable"


def eigensolve(base, qform, n_modes=64):
    """Lowest n_modes eigenpairs of L, Q-orthonormalized and tagged."""
    if n_modes > base.N // 2:
        raise SpectralError("n_modes must not exceed N/2")
    op = assemble_L(base)
    raw = []
    if base.kind == "planar_curve":
        mu, vec = _profile_eigensolve(base, qform, 0)
        for i in range(min(n_modes, len(mu))):
            raw.append((mu[i], 0, "", vec[:, i]))
    else:
        for m in range(base.M + 1):
            mu, vec = _profile_eigensolve(base, qform, m,
                                          strong_block=op.blocks[m])
            keep = min(n_modes, len(mu))
            for i in range(keep):
                raw.append((mu[i], m, "cos", vec[:, i]))
                if m:
                    raw.append((mu[i], m, "sin", vec[:, i]))
    raw.sort(key=lambda t: (t[0], t[1], t[2]))
    raw = raw[:n_modes]
    modes = []
    for mu, m, phase, f in raw:
        # deterministic sign: largest-magnitude entry positive
        f = f * np.sign(f[np.argmax(np.abs(f))])
        res = _strong_residual(base, op, m, mu, f)
        g = _mode_graph(base, m, phase, f)
        g = (1.0 / qform.norm(g)) * g
        modes.append(EigenMode(mu=float(mu), m=m, phase=phase, fn=g,
                               residual=res))
    spec = Spectrum(base=base, qform=qform, modes=modes)
    _tag_modes(spec)
    return spec


def _mode_profile_values(base, g, m, phase):
    """Extract the profile function of a single-angular-mode field."""
    if base.kind == "planar_curve":
        return g.values
    if m == 0:
        return g.values.mean(axis=0)
    tr = np.cos(m * base.theta) if phase == "cos" else np.sin(m * base.theta)
    return (g.values * tr[:, None]).sum(axis=0) * (2.0 / base.n_theta)


# ---------------------------------------------------------------------------
# splitting and the linearized time-one map
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class Splitting:
    spectrum: Spectrum
    qform: QForm
    index_unstable: list        # indices with mu < -1 (the expanding block)
    lambda_expand: float        # e^{-mu_j}, mu_j largest eigenvalue < -1
    mu_contract: float          # e, the T bound on the complementary block
    kappa: float                # sup-norm comparison constant on E1
    round_flag: bool            # theorem hypotheses fail (no mu < -1)
    gap_tol: float

    @property
    def dim_unstable(self):
        return len(self.index_unstable)

    def _dual_matrix(self):
        """Rows D_i with Q(u, w_i) = sum(D_i * u.values), flat on the grid.

        Uses the exact discrete adjoint of the spectral derivatives
        (antisymmetric on the uniform grid), so the extraction reproduces
        qform.inner to roundoff while costing one GEMV per state.
        """
        if getattr(self, "_dual", None) is not None:
            return self._dual
        base = self.spectrum.base
        q = self.qform
        from .geometry import grad_frame_values
        if base.kind == "planar_curve":
            W = base.area_weight * base.gauss_weight
            z = q.lam - base.A2 - 0.5
        else:
            W = base.grid_weights() * base.gauss_weight[None, :]
            z = (q.lam - base.A2 - 0.5)[None, :]
        rows = []
        for mode in self.spectrum.modes:
            wv = mode.fn.values
            g = grad_frame_values(base, wv)
            d = W * z * wv - base.field_ds(W * g[0])
            if base.kind == "rot_surface":
                r = base.profile[:, 0]
                d = d - base.field_dtheta(W * g[1] / r, axis=-2)
            rows.append(d.ravel())
        self._dual = np.stack(rows)
        return self._dual

    def coefficients_batch(self, V):
        """Q-coefficients for a batch of value arrays (batch leading)."""
        D = self._dual_matrix()
        return np.asarray(V).reshape(V.shape[0], -1) @ D.T

    def coefficients(self, u):
        """Q-coefficients of u in the resolved eigenbasis, plus residual."""
        D = self._dual_matrix()
        c = D @ np.asarray(u.values).ravel()
        nrm2 = self.qform.inner(u, u)
        resid2 = max(nrm2 - (c ** 2).sum(), 0.0)
        return c, float(np.sqrt(resid2))

    def from_coefficients(self, c):
        modes = self.spectrum.modes
        data = sum(ci * m.fn.data for ci, m in zip(c, modes))
        return GraphFunction(self.spectrum.base, data)

    def project(self, u, which):
        """Q-orthogonal projection onto the expanding (1) or remaining (2) block."""
        if which not in (1, 2):
            raise SpectralError("projection block must be 1 or 2")
        if not self.index_unstable:
            p1 = 0.0 * u
        else:
            c, _ = self.coefficients(u)
            mask = np.zeros_like(c)
            for i in self.index_unstable:
                mask[i] = c[i]
            p1 = self.from_coefficients(mask)
        return p1 if which == 1 else u - p1

    def apply_T(self, u, truncation_tol=1e-5):
        """Diagonal linearized time-one map on the resolved span."""
        c, resid = self.coefficients(u)
        nrm = self.qform.norm(u)
        if nrm > 0 and resid > truncation_tol * nrm:
            raise SpectralError(
                f"input outside the resolved eigenspan: residual {resid:.3e} "
                f"vs norm {nrm:.3e}")
        mus = self.spectrum.mus()
        return self.from_coefficients(np.exp(-mus) * c), resid


def _verify_marginal(spectrum, mode):
    """Strong residual of L w + w; small iff w is genuinely eigen at -1."""
    base = spectrum.base
    op = assemble_L(base)
    f = _mode_profile_values(base, mode.fn, mode.m, mode.phase)
    return _strong_residual(base, op, mode.m, -1.0, f)


def make_splitting(spectrum, qform=None, gap_tol=DEFAULT_GAP_TOL):
    """Split the resolved spectrum at eigenvalue -1; build T's constants.

    Modes within gap_tol of -1 must either be recognized geometric modes or
    verify as genuinely marginal (eigen at -1 within resolution, e.g. the
    m = +-1 pair the shrinking donut carries there); both belong to the
    non-expanding block under the strict mu < -1 rule.  Anything else in
    the gap aborts rather than guessing its side.
    """
    qform = qform or spectrum.qform
    idx1 = []
    for i, mode in enumerate(spectrum.modes):
        if abs(mode.mu + 1.0) <= gap_tol:
            if mode.tag not in ("dilation", "marginal"):
                if _verify_marginal(spectrum, mode) <= 1e-6:
                    mode.tag = "marginal"
                else:
                    raise SpectralGapError(
                        f"eigenvalue {mode.mu} within {gap_tol} of -1 is not "
                        "a recognized geometric or verified marginal mode")
            continue
        if mode.mu < -1.0:
            idx1.append(i)
    round_flag = not idx1
    if idx1:
        mu_j = max(spectrum.modes[i].mu for i in idx1)
        lam = float(np.exp(-mu_j))
    else:
        lam = float("nan")
    # kappa ||x||_sup <= ||x||_Q on the expanding block, via Cauchy-Schwarz
    if idx1:
        stack = np.stack([np.asarray(spectrum.modes[i].fn.values)
                          for i in idx1])
        kappa = float(1.0 / np.sqrt((stack ** 2).sum(axis=0)).max())
    else:
        kappa = float("nan")
    split = Splitting(spectrum=spectrum, qform=qform, index_unstable=idx1,
                      lambda_expand=lam, mu_contract=float(np.e),
                      kappa=kappa, round_flag=round_flag, gap_tol=gap_tol)
    _check_group_modes_in_block2(split)
    return split


def _check_group_modes_in_block2(split):
    """Translations, dilations and rotations must avoid the expanding block."""
    q = split.qform
    for name, g in geometric_candidates(split.spectrum.base).items():
        nrm = q.norm(g)
        if nrm < 1e-8:
            continue
        p1 = split.project((1.0 / nrm) * g, 1)
        if q.norm(p1) > 1e-6:
            raise SpectralError(
                f"group field {name} leaks into the expanding block")


def apply_T(splitting, u):
    out, _ = splitting.apply_T(u)
    return out


def project(splitting, u, which):
    return splitting.project(u, which)


# ---------------------------------------------------------------------------
# cache files
# ---------------------------------------------------------------------------

SPEC_MAGIC = "shrinklab-spec v1"


def save_spectrum(spectrum, path, geom_hash=""):
    lines = [SPEC_MAGIC, f"geom-hash {geom_hash}",
             f"count {len(spectrum.modes)} lambda {spectrum.qform.lam:.17g}"]
    for i, m in enumerate(spectrum.modes):
        lines.append(f"{i} {m.m} {m.mu:.17g} {m.residual:.17g} "
                     f"{m.phase or '-'} {m.tag or '-'}")
    for m in spectrum.modes:
        flat = np.asarray(m.fn.data)
        if np.iscomplexobj(flat):
            flat = np.concatenate([flat.real.ravel(), flat.imag.ravel()])
        lines.append(" ".join(f"{v:.17g}" for v in flat.ravel()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_spectrum_header(path):
    """Rows (i, m, mu, residual, phase, tag) and the recorded geometry hash."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if lines[0] != SPEC_MAGIC:
        raise SpectralError(f"not a spectrum cache: {path}")
    geom_hash = lines[1].split()[1] if len(lines[1].split()) > 1 else ""
    count = int(lines[2].split()[1])
    rows = []
    for ln in lines[3:3 + count]:
        parts = ln.split()
        rows.append((int(parts[0]), int(parts[1]), float(parts[2]),
                     float(parts[3]), parts[4], parts[5]))
    return rows, geom_hash
