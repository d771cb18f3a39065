"""Training objectives with hand-derived analytic gradients.

Everything here operates on one scene of n points with c inlier classes.
The head produces inlier logits (n, c) and one outlier logit per point; the
(c+1)-way softmax over their concatenation yields inlier probabilities p^y
and the outlier probability p^o. The point-wise abstaining penalty

    alpha_i = -log sum_j exp(yhat_ij)

scales the abstain term p^o / alpha^2 inside the abstain loss, and the
penalty losses push alpha below m_in for inliers and above the outlier
margins for (resized / asset-synthesized) outliers via hinges. Gradients
are exact analytic derivatives with respect to the inlier logits, the
outlier logit and, for the dynamic penalty, the three margin weights beta;
they flow through both the softmax and alpha. The hinge subgradient at a
kink is 0.

Batching over scenes is the trainer's job (mean of per-scene means), so the
values here are plain means over the scene's points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LabelSpace, RngStream

_TINY = np.finfo(np.float64).tiny


@dataclass
class HeadOutput:
    """Per-point inlier logits (n, c) and outlier logit (n,)."""

    inlier_logits: np.ndarray
    outlier_logit: np.ndarray

    def __post_init__(self):
        self.inlier_logits = np.asarray(self.inlier_logits, dtype=np.float64)
        self.outlier_logit = np.asarray(self.outlier_logit, dtype=np.float64)
        if self.inlier_logits.ndim != 2:
            raise ValueError("inlier_logits must be (n, c)")
        n, c = self.inlier_logits.shape
        if n < 1 or c < 1:
            raise ValueError("need n >= 1 points and c >= 1 classes")
        if self.outlier_logit.shape == (n, 1):
            self.outlier_logit = self.outlier_logit[:, 0]
        if self.outlier_logit.shape != (n,):
            raise ValueError("outlier_logit must be (n,)")
        if not (np.all(np.isfinite(self.inlier_logits))
                and np.all(np.isfinite(self.outlier_logit))):
            raise ValueError("logits must be finite")

    @property
    def num_points(self) -> int:
        return self.inlier_logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.inlier_logits.shape[1]

    def logits(self) -> np.ndarray:
        """Concatenated (n, c+1) logits [yhat, ohat]."""
        return np.concatenate([self.inlier_logits, self.outlier_logit[:, None]], axis=1)


@dataclass
class Probs:
    """Row-stochastic (n, c+1) probabilities; last column is p^o."""

    full: np.ndarray

    @property
    def inlier(self) -> np.ndarray:
        return self.full[:, :-1]

    @property
    def outlier(self) -> np.ndarray:
        return self.full[:, -1]


@dataclass
class LossConfig:
    """Margins, loss weights, and numeric guards.

    The static margins (m_in, m_out) and the dynamic ones (m_rout for
    resized outliers, m_sout for asset outliers) default to the reference
    values -12 / -6 / -6 / -7. All lambda weights default to 1 (the source
    recipe leaves them unstated). ``alpha_floor`` clamps alpha^2 away from
    the 1/alpha^2 singularity.
    """

    margin_in: float = -12.0
    margin_out: float = -6.0
    margin_resized: float = -6.0
    margin_synth: float = -7.0
    weight_abstain: float = 1.0
    weight_penalty: float = 1.0
    weight_dynamic: float = 1.0
    weight_cce: float = 1.0
    alpha_floor: float = 1e-8
    clamp_beta: bool = False

    def __post_init__(self):
        if not self.alpha_floor > 0:
            raise ValueError("alpha_floor must be > 0")
        for name in ("weight_abstain", "weight_penalty", "weight_dynamic", "weight_cce"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class LossResult:
    value: float
    grad_inlier: np.ndarray
    grad_outlier: np.ndarray
    grad_beta: np.ndarray | None = None

    def grad_logits(self) -> np.ndarray:
        return np.concatenate([self.grad_inlier, self.grad_outlier[:, None]], axis=1)


def softmax_head(head: HeadOutput) -> Probs:
    """Row-wise softmax over [yhat, ohat], max-shifted for stability."""
    z = head.logits()
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return Probs(e / e.sum(axis=1, keepdims=True))


def compute_alpha(inlier_logits: np.ndarray) -> np.ndarray:
    """alpha_i = -logsumexp of the i-th row of the inlier logits."""
    y = np.asarray(inlier_logits, dtype=np.float64)
    m = y.max(axis=1)
    return -(m + np.log(np.exp(y - m[:, None]).sum(axis=1)))


def _inlier_softmax(inlier_logits: np.ndarray) -> np.ndarray:
    y = inlier_logits - inlier_logits.max(axis=1, keepdims=True)
    e = np.exp(y)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, space: LabelSpace, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError("labels length must match logit rows")
    space.validate(labels)
    return labels


def abstain_loss(head: HeadOutput, labels, space: LabelSpace, cfg: LossConfig) -> LossResult:
    """Point-wise abstain loss.

    Inlier points pay -log(p^y_true + p^o/alpha^2); outlier points (both
    outlier labels) pay -sum_j log(p^y_j + p^o/alpha^2) over the c inlier
    classes. alpha^2 is floored at ``cfg.alpha_floor``; log arguments are
    floored at the smallest positive double so the value stays finite for
    any finite logits, with the gradient gated off at the floor.
    """
    n, c = head.num_points, head.num_classes
    labels = _check_labels(labels, space, n)
    inlier_mask = labels <= space.num_classes

    probs = softmax_head(head)
    p = probs.full
    p_o = probs.outlier
    s = _inlier_softmax(head.inlier_logits)
    alpha = compute_alpha(head.inlier_logits)

    alpha_sq = alpha * alpha
    clamped = alpha_sq <= cfg.alpha_floor
    a_cap = np.maximum(alpha_sq, cfg.alpha_floor)
    abstain = p_o / a_cap

    # d(abstain)/dz, shared by both branches
    gate = np.where(clamped, 0.0, 1.0)
    da_dy = (-p_o[:, None] * p[:, :c] + (2.0 * alpha * gate * p_o / a_cap)[:, None] * s) / a_cap[:, None]
    da_do = p_o * (1.0 - p_o) / a_cap

    values = np.zeros(n)
    grad = np.zeros((n, c + 1))

    inl = np.flatnonzero(inlier_mask)
    if inl.size:
        cols = labels[inl] - 1
        p_true = p[inl, cols]
        t = p_true + abstain[inl]
        t_safe = np.maximum(t, _TINY)
        values[inl] = -np.log(t_safe)
        inv_t = np.where(t > _TINY, 1.0 / t_safe, 0.0)
        dpy = -p_true[:, None] * p[inl]
        dpy[np.arange(inl.size), cols] += p_true
        da_full = np.concatenate([da_dy[inl], da_do[inl, None]], axis=1)
        grad[inl] = -inv_t[:, None] * (dpy + da_full)

    out = np.flatnonzero(~inlier_mask)
    if out.size:
        q = p[out, :c] + abstain[out, None]
        q_safe = np.maximum(q, _TINY)
        values[out] = -np.log(q_safe).sum(axis=1)
        inv_q = np.where(q > _TINY, 1.0 / q_safe, 0.0)
        s1 = inv_q.sum(axis=1)
        s2 = (p[out, :c] * inv_q).sum(axis=1)
        grad[out, :c] = -(p[out, :c] * (inv_q - s2[:, None]) + s1[:, None] * da_dy[out])
        grad[out, c] = p_o[out] * s2 - s1 * da_do[out]

    grad /= n
    return LossResult(
        value=float(values.mean()),
        grad_inlier=grad[:, :c],
        grad_outlier=grad[:, c],
    )


def penalty_loss(head: HeadOutput, labels, space: LabelSpace, cfg: LossConfig) -> LossResult:
    """Static point-wise penalty: hinge alpha below m_in for inliers,
    above m_out for outliers (both outlier labels)."""
    n, c = head.num_points, head.num_classes
    labels = _check_labels(labels, space, n)
    inlier_mask = labels <= space.num_classes

    alpha = compute_alpha(head.inlier_logits)
    act_in = inlier_mask & (alpha > cfg.margin_in)
    act_out = ~inlier_mask & (alpha < cfg.margin_out)
    value = (
        np.sum(alpha[act_in] - cfg.margin_in)
        + np.sum(cfg.margin_out - alpha[act_out])
    ) / n

    g_alpha = (act_in.astype(np.float64) - act_out.astype(np.float64)) / n
    s = _inlier_softmax(head.inlier_logits)
    return LossResult(
        value=float(value),
        grad_inlier=-g_alpha[:, None] * s,
        grad_outlier=np.zeros(n),
    )


def dynamic_penalty_loss(
    head: HeadOutput, labels, space: LabelSpace, cfg: LossConfig, beta
) -> LossResult:
    """Three-way penalty with learnable margin weights beta.

    Inliers hinge on beta_in * m_in, resized outliers (label c+1) on
    beta_rout * m_rout, asset outliers (label c+2) on beta_sout * m_sout.
    ``grad_beta`` holds the derivatives with respect to the three weights.
    """
    n, c = head.num_points, head.num_classes
    labels = _check_labels(labels, space, n)
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (3,):
        raise ValueError("beta must have shape (3,)")

    inlier_mask = labels <= space.num_classes
    resized = labels == space.resized_outlier
    synth = labels == space.synthetic_outlier

    alpha = compute_alpha(head.inlier_logits)
    thr_in = beta[0] * cfg.margin_in
    thr_r = beta[1] * cfg.margin_resized
    thr_s = beta[2] * cfg.margin_synth

    act_in = inlier_mask & (alpha > thr_in)
    act_r = resized & (alpha < thr_r)
    act_s = synth & (alpha < thr_s)

    value = (
        np.sum(alpha[act_in] - thr_in)
        + np.sum(thr_r - alpha[act_r])
        + np.sum(thr_s - alpha[act_s])
    ) / n

    g_alpha = (
        act_in.astype(np.float64) - act_r.astype(np.float64) - act_s.astype(np.float64)
    ) / n
    s = _inlier_softmax(head.inlier_logits)
    grad_beta = np.array([
        -cfg.margin_in * act_in.sum(),
        cfg.margin_resized * act_r.sum(),
        cfg.margin_synth * act_s.sum(),
    ]) / n
    return LossResult(
        value=float(value),
        grad_inlier=-g_alpha[:, None] * s,
        grad_outlier=np.zeros(n),
        grad_beta=grad_beta,
    )


def total_loss(
    head: HeadOutput,
    labels,
    space: LabelSpace,
    cfg: LossConfig,
    mode: str = "static",
    beta=None,
) -> LossResult:
    """weight_abstain * abstain + the selected penalty variant."""
    ab = abstain_loss(head, labels, space, cfg)
    if mode == "static":
        pen = penalty_loss(head, labels, space, cfg)
        w_pen = cfg.weight_penalty
        grad_beta = None
    elif mode == "dynamic":
        if beta is None:
            raise ValueError("dynamic mode requires beta")
        pen = dynamic_penalty_loss(head, labels, space, cfg, beta)
        w_pen = cfg.weight_dynamic
        grad_beta = w_pen * pen.grad_beta
    else:
        raise ValueError(f"unknown mode {mode!r}")
    w_ab = cfg.weight_abstain
    return LossResult(
        value=w_ab * ab.value + w_pen * pen.value,
        grad_inlier=w_ab * ab.grad_inlier + w_pen * pen.grad_inlier,
        grad_outlier=w_ab * ab.grad_outlier + w_pen * pen.grad_outlier,
        grad_beta=grad_beta,
    )


def cce_loss(head: HeadOutput, labels, space: LabelSpace, weight_cce: float = 1.0) -> LossResult:
    """The calibration-CE baseline: (c+1)-way cross entropy plus, for inlier
    points only, a term that drives the outlier logit toward the largest of
    the remaining logits.

    Both outlier labels collapse to c+1 here, since this baseline knows a
    single outlier class. weight_cce = 0 gives plain cross entropy.
    """
    n, c = head.num_points, head.num_classes
    labels = _check_labels(labels, space, n)
    merged = np.minimum(labels, space.num_classes + 1)
    cols = merged - 1

    z = head.logits()
    shift = z - z.max(axis=1, keepdims=True)
    e = np.exp(shift)
    denom = e.sum(axis=1)
    p = e / denom[:, None]
    lse = np.log(denom) + z.max(axis=1)

    rows = np.arange(n)
    ce = lse - z[rows, cols]
    grad = p.copy()
    grad[rows, cols] -= 1.0

    inl = np.flatnonzero(cols < c)
    cce = np.zeros(n)
    if weight_cce != 0.0 and inl.size:
        z_ex = z[inl].copy()
        z_ex[np.arange(inl.size), cols[inl]] = -np.inf
        m = z_ex.max(axis=1)
        e_ex = np.exp(z_ex - m[:, None])
        lse_ex = m + np.log(e_ex.sum(axis=1))
        cce[inl] = lse_ex - z[inl, c]
        w = e_ex / e_ex.sum(axis=1, keepdims=True)
        w[:, c] -= 1.0
        grad[inl] += weight_cce * w

    value = float((ce + weight_cce * cce).mean())
    grad /= n
    return LossResult(value=value, grad_inlier=grad[:, :c], grad_outlier=grad[:, c])


def finite_difference_grads(value_fn, head: HeadOutput, beta=None, step: float = 1e-5,
                            probes: int | None = None, rng=None):
    """Central-difference gradients of ``value_fn(head, beta)``.

    The oracle side of every gradient check: it consumes loss *values*
    only, never analytic gradients. With ``probes`` set, only that many
    seeded-random logit entries are probed (NaN marks unprobed entries);
    beta entries are always probed when beta is given.
    """
    y0 = head.inlier_logits
    o0 = head.outlier_logit

    def value(y, o, b):
        return value_fn(HeadOutput(y, o), b)

    n, c = y0.shape
    if probes is None:
        y_idx = [(i, j) for i in range(n) for j in range(c)]
        o_idx = list(range(n))
        fill = 0.0
    else:
        gen = np.random.default_rng(0) if rng is None else rng
        flat = gen.choice(n * c, size=min(probes, n * c), replace=False)
        y_idx = [(int(k) // c, int(k) % c) for k in flat]
        o_idx = [int(v) for v in
                 gen.choice(n, size=min(probes, n), replace=False)]
        fill = np.nan

    fd_y = np.full_like(y0, fill)
    for i, j in y_idx:
        hi = y0.copy(); hi[i, j] += step
        lo = y0.copy(); lo[i, j] -= step
        fd_y[i, j] = (value(hi, o0, beta) - value(lo, o0, beta)) / (2 * step)

    fd_o = np.full_like(o0, fill)
    for i in o_idx:
        hi = o0.copy(); hi[i] += step
        lo = o0.copy(); lo[i] -= step
        fd_o[i] = (value(y0, hi, beta) - value(y0, lo, beta)) / (2 * step)

    fd_b = None
    if beta is not None:
        beta = np.asarray(beta, dtype=np.float64)
        fd_b = np.zeros_like(beta)
        for i in range(beta.size):
            hi = beta.copy(); hi[i] += step
            lo = beta.copy(); lo[i] -= step
            fd_b[i] = (value(y0, o0, hi) - value(y0, o0, lo)) / (2 * step)
    return fd_y, fd_o, fd_b


def max_relative_error(result: LossResult, fd_grads) -> float:
    """max |analytic - fd| / max(1, |analytic|) over every probed entry."""
    fd_y, fd_o, fd_b = fd_grads
    blocks = [(result.grad_inlier, fd_y), (result.grad_outlier, fd_o)]
    if fd_b is not None:
        if result.grad_beta is None:
            raise ValueError("loss produced no beta gradient to compare")
        blocks.append((result.grad_beta, fd_b))
    worst = 0.0
    for analytic, fd in blocks:
        probed = ~np.isnan(fd)
        if not probed.any():
            continue
        err = (np.abs(analytic - fd)[probed]
               / np.maximum(1.0, np.abs(analytic)[probed]))
        worst = max(worst, float(err.max()))
    return worst


def random_instance(space: LabelSpace, stream: RngStream, max_points: int = 64,
                    sigma: float = 3.0):
    """One seeded random (head, labels, beta) instance for gradient checks."""
    gen = stream.generator()
    n = int(gen.integers(2, max_points + 1))
    c = space.num_classes
    head = HeadOutput(
        gen.normal(0.0, sigma, size=(n, c)),
        gen.normal(0.0, sigma, size=n),
    )
    labels = gen.integers(1, space.max_label + 1, size=n)
    beta = gen.uniform(0.5, 1.5, size=3)
    return head, labels, beta


def run_gradient_checks(
    num_instances: int = 100,
    max_points: int = 64,
    num_classes: int = 4,
    sigma: float = 3.0,
    seed: int = 0,
    step: float = 1e-5,
    probes: int | None = 12,
) -> dict[str, tuple[float, int]]:
    """Check every loss's analytic gradients against central differences on
    seeded random instances.

    ``probes`` bounds the randomly chosen logit entries probed per instance
    and loss (None probes everything; the default keeps 100 instances well
    under half a minute while still covering ~1000 entries per loss).
    Returns {loss name: (max relative error, stream id of the worst
    instance)}; the stream id replays the instance via
    ``random_instance(space, RngStream(seed, stream_id))``.
    """
    space = LabelSpace(num_classes)
    cfg = LossConfig()

    def table():
        # resolved at call time so a test can monkeypatch a loss
        return {
            "cce": (
                lambda h, lab, b: cce_loss(h, lab, space, cfg.weight_cce),
                lambda h, lab, b: cce_loss(h, lab, space, cfg.weight_cce).value,
                False,
            ),
            "abstain": (
                lambda h, lab, b: abstain_loss(h, lab, space, cfg),
                lambda h, lab, b: abstain_loss(h, lab, space, cfg).value,
                False,
            ),
            "penalty": (
                lambda h, lab, b: penalty_loss(h, lab, space, cfg),
                lambda h, lab, b: penalty_loss(h, lab, space, cfg).value,
                False,
            ),
            "dynamic_penalty": (
                lambda h, lab, b: dynamic_penalty_loss(h, lab, space, cfg, b),
                lambda h, lab, b: dynamic_penalty_loss(h, lab, space, cfg, b).value,
                True,
            ),
            "total_static": (
                lambda h, lab, b: total_loss(h, lab, space, cfg, "static"),
                lambda h, lab, b: total_loss(h, lab, space, cfg, "static").value,
                False,
            ),
            "total_dynamic": (
                lambda h, lab, b: total_loss(h, lab, space, cfg, "dynamic", b),
                lambda h, lab, b: total_loss(h, lab, space, cfg, "dynamic", b).value,
                True,
            ),
        }

    results = {name: (0.0, -1) for name in table()}
    for k in range(num_instances):
        stream = RngStream(seed, k)
        head, labels, beta = random_instance(
            space, stream, max_points=max_points, sigma=sigma
        )
        probe_rng = np.random.default_rng([seed, k])
        for name, (loss_fn, value_fn, uses_beta) in table().items():
            b = beta if uses_beta else None
            analytic = loss_fn(head, labels, b)
            fd = finite_difference_grads(
                lambda hh, bb: value_fn(hh, labels, bb), head, beta=b, step=step,
                probes=probes, rng=probe_rng,
            )
            err = max_relative_error(analytic, fd)
            if err > results[name][0]:
                results[name] = (err, k)
    return results
