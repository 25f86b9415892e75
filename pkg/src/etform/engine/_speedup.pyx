# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled stepping kernel. Must implement the step semantics documented in
engine.common exactly as py_engine does; tests/test_engine_parity.py holds the
two together. Only the tagged parametric nonlinearity forms and basis kinds
are supported here; anything else falls back to the python engine."""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, isfinite, sin, sqrt, tanh

cnp.import_array()

from .common import StepResult

DEF BASIS_QUAD = 0
DEF FOLLOWER_ZERO = 0
DEF FOLLOWER_SIN = 1
DEF LEADER_ZERO = 0
DEF LEADER_DRIFT = 1


cdef inline void _matvec(double[:, ::1] mat, double* vec, double* out, int rows, int cols) noexcept:
    cdef int i, j
    cdef double acc
    for i in range(rows):
        acc = 0.0
        for j in range(cols):
            acc += mat[i, j] * vec[j]
        out[i] = acc


cdef inline double _quad_form(double[:, ::1] mat, double* vec, int dim) noexcept:
    cdef int i, j
    cdef double acc = 0.0
    for i in range(dim):
        for j in range(dim):
            acc += vec[i] * mat[i, j] * vec[j]
    return acc


cdef void _jacobian(int basis_kind, double[:, ::1] hidden, double* e, int d, int kk,
                    double[:, ::1] jac) noexcept:
    # quadratic ordering: squares, cross monomials (i < j), linear terms
    cdef int i, j, idx
    cdef double th, acc
    if basis_kind == BASIS_QUAD:
        for idx in range(kk):
            for j in range(d):
                jac[idx, j] = 0.0
        for i in range(d):
            jac[i, i] = 2.0 * e[i]
        idx = d
        for i in range(d):
            for j in range(i + 1, d):
                jac[idx, i] = e[j]
                jac[idx, j] = e[i]
                idx += 1
        for i in range(d):
            jac[idx + i, i] = 1.0
    else:
        for idx in range(kk):
            acc = 0.0
            for j in range(d):
                acc += hidden[idx, j] * e[j]
            th = tanh(acc)
            for j in range(d):
                jac[idx, j] = (1.0 - th * th) * hidden[idx, j]


def run_steps(object problem):
    cdef int n = problem.n
    cdef int d = problem.d
    cdef int m = problem.m
    cdef int kk = problem.k
    cdef long n_steps = problem.n_steps
    cdef double dt = problem.dt

    cdef double[:, ::1] a_sys = np.ascontiguousarray(problem.a_sys, dtype=np.float64)
    cdef double[:, ::1] b_in = np.ascontiguousarray(problem.b_in, dtype=np.float64)
    cdef long[::1] indptr = np.ascontiguousarray(problem.indptr, dtype=np.int64)
    cdef long[::1] indices = np.ascontiguousarray(problem.indices, dtype=np.int64)
    cdef double[::1] nbr_w = np.ascontiguousarray(problem.nbr_weights, dtype=np.float64)
    cdef double[::1] pinning = np.ascontiguousarray(problem.pinning, dtype=np.float64)
    cdef double[::1] kappa = np.ascontiguousarray(problem.kappa, dtype=np.float64)
    cdef double[:, :, ::1] gain = np.ascontiguousarray(problem.gain, dtype=np.float64)
    cdef double[:, ::1] offsets = np.ascontiguousarray(problem.offsets, dtype=np.float64)
    cdef double[:, ::1] c_vec = np.ascontiguousarray(problem.c_vec, dtype=np.float64)
    cdef double[:, ::1] q = np.ascontiguousarray(problem.q, dtype=np.float64)
    cdef double[:, ::1] r_self = np.ascontiguousarray(problem.r_self, dtype=np.float64)
    cdef double[:, ::1] r_nbr = np.ascontiguousarray(problem.r_neighbor, dtype=np.float64)
    cdef double lam_min_rs = problem.lam_min_r_self
    cdef double lam_max_rs = problem.lam_max_r_self
    cdef double lam_min_rn = problem.lam_min_r_neighbor
    cdef int basis_kind = problem.basis_kind
    cdef double[:, ::1] hidden = np.ascontiguousarray(problem.hidden, dtype=np.float64)
    cdef int follower_kind = problem.follower_kind
    cdef double f_amp = problem.follower_params[0]
    cdef double f_freq = problem.follower_params[1]
    cdef int leader_kind = problem.leader_kind
    cdef double l_drift = problem.leader_params[0]
    cdef double l_cos = problem.leader_params[1]
    cdef double l_sin = problem.leader_params[2]
    cdef double l_freq = problem.leader_params[3]
    cdef double trig_m = problem.trig_m
    cdef long check_stride = problem.check_stride
    cdef double alpha = problem.alpha
    cdef bint normalize = problem.normalize
    cdef bint retrigger = problem.retrigger
    cdef unsigned char[::1] dos_flags = np.ascontiguousarray(problem.dos_flags, dtype=np.uint8)

    cdef long n_rows = n_steps + 1
    times_np = np.empty(n_rows)
    leader_np = np.empty((n_rows, d))
    followers_np = np.empty((n_rows, n, d))
    errors_np = np.empty((n_rows, n, d))
    controls_np = np.empty((n_rows, n, m))
    delta_np = np.empty((n_rows, n))
    weights_np = np.empty((n_rows, n, kk))
    rate_np = np.empty((n_rows, n))
    cost_np = np.empty((n_rows, n))
    dos_np = np.zeros(n_rows, dtype=np.uint8)
    cdef double[::1] times = times_np
    cdef double[:, ::1] leader_log = leader_np
    cdef double[:, :, ::1] followers_log = followers_np
    cdef double[:, :, ::1] errors_log = errors_np
    cdef double[:, :, ::1] controls_log = controls_np
    cdef double[:, ::1] delta_log = delta_np
    cdef double[:, :, ::1] weights_log = weights_np
    cdef double[:, ::1] rate_log = rate_np
    cdef double[:, ::1] cost_log = cost_np
    cdef unsigned char[::1] dos_log = dos_np

    # mutable state
    x0_np = np.array(problem.x0_init, dtype=np.float64).copy()
    x_np = np.array(problem.x_init, dtype=np.float64).copy()
    w_np = np.array(problem.w_init, dtype=np.float64).copy()
    cdef double[::1] x0 = x0_np
    cdef double[:, ::1] x = x_np
    cdef double[:, ::1] w = w_np
    cdef double[:, ::1] e = np.zeros((n, d))
    cdef double[:, ::1] e_held = np.zeros((n, d))
    cdef double[:, ::1] u_prev = np.zeros((n, m))
    cdef double[:, ::1] u_held = np.zeros((n, m))
    cdef double[:, ::1] u_app = np.zeros((n, m))
    cdef double[::1] cum = np.zeros(n)
    cdef double[:, ::1] f_x = np.zeros((n, d))
    cdef double[::1] f0 = np.zeros(d)
    cdef double[::1] ax0 = np.zeros(d)
    cdef double[:, ::1] jac = np.zeros((kk, d))
    # scratch
    cdef double[::1] scratch_d = np.zeros(d)
    cdef double[::1] edot = np.zeros(d)
    cdef double[::1] sigma = np.zeros(kk)
    cdef double[::1] grad = np.zeros(d)
    cdef double[::1] uf = np.zeros(m)
    cdef double[::1] tmp_m = np.zeros(m)
    # RK4 stage buffers
    cdef double[::1] x0_stage = np.zeros(d)
    cdef double[:, ::1] x_stage = np.zeros((n, d))
    cdef double[::1] k0_1 = np.zeros(d)
    cdef double[::1] k0_2 = np.zeros(d)
    cdef double[::1] k0_3 = np.zeros(d)
    cdef double[::1] k0_4 = np.zeros(d)
    cdef double[:, ::1] kx_1 = np.zeros((n, d))
    cdef double[:, ::1] kx_2 = np.zeros((n, d))
    cdef double[:, ::1] kx_3 = np.zeros((n, d))
    cdef double[:, ::1] kx_4 = np.zeros((n, d))

    trig_steps = []
    trig_agents = []

    cdef double thr_denom = lam_max_rs * lam_max_rs * trig_m * trig_m
    cdef bint prev_active = False
    cdef bint diverged = False
    cdef long divergence_step = -1
    cdef long rows = n_rows
    cdef long k
    cdef int i, j, a, b_i
    cdef long lo, hi, jj
    cdef double t, dn2, thr, acc, rho, residual, rate_step, den
    cdef bint active, forced, check, finite_ok

    # held errors start at the initial errors (zero measurement error at k=0)
    _compute_errors(x, x0, offsets, indptr, indices, nbr_w, pinning, kappa, e, n, d)
    for i in range(n):
        for j in range(d):
            e_held[i, j] = e[i, j]

    for k in range(n_rows):
        t = k * dt
        active = dos_flags[k] != 0
        _compute_errors(x, x0, offsets, indptr, indices, nbr_w, pinning, kappa, e, n, d)

        if active:
            for i in range(n):
                for j in range(m):
                    u_app[i, j] = 0.0
                    u_prev[i, j] = 0.0
                acc = 0.0
                for j in range(d):
                    acc += (e_held[i, j] - e[i, j]) ** 2
                delta_log[k, i] = sqrt(acc)
        else:
            forced = (k == 0) or (prev_active and retrigger)
            check = forced or check_stride <= 1 or (k % check_stride == 0)
            if check:
                _follower_drift(follower_kind, f_amp, f_freq, x, f_x, n, d)
                _leader_drift(leader_kind, l_drift, l_cos, l_sin, l_freq, x0, f0, d)
                _matvec(a_sys, &x0[0], &ax0[0], d, d)
                for i in range(n):
                    acc = 0.0
                    for j in range(d):
                        acc += (e_held[i, j] - e[i, j]) ** 2
                    dn2 = acc
                    lo = indptr[i]
                    hi = indptr[i + 1]
                    thr = 0.0
                    for jj in range(lo, hi):
                        a = <int> indices[jj]
                        acc = 0.0
                        for j in range(m):
                            acc += u_prev[a, j] * u_prev[a, j]
                        thr += lam_min_rn * acc
                    acc = 0.0
                    for j in range(m):
                        acc += u_prev[i, j] * u_prev[i, j]
                    thr = (thr + lam_min_rs * acc) / thr_denom
                    if forced or (dn2 >= thr and dn2 > 0.0):
                        _update_and_refresh(
                            i, e, x, x0, f_x, f0, ax0, u_prev, w, e_held, u_held,
                            a_sys, b_in, q, r_self, r_nbr, gain, c_vec, kappa,
                            pinning, indptr, indices, nbr_w, basis_kind, hidden,
                            alpha, normalize, jac, edot, sigma, grad, uf, tmp_m,
                            scratch_d, n, d, m, kk,
                        )
                        trig_steps.append(k)
                        trig_agents.append(i)
                        delta_log[k, i] = 0.0
                    else:
                        delta_log[k, i] = sqrt(dn2)
            else:
                for i in range(n):
                    acc = 0.0
                    for j in range(d):
                        acc += (e_held[i, j] - e[i, j]) ** 2
                    delta_log[k, i] = sqrt(acc)
            for i in range(n):
                for j in range(m):
                    u_app[i, j] = u_held[i, j]
                    u_prev[i, j] = u_held[i, j]

        # cost rates with applied controls
        for i in range(n):
            rho = _quad_form(q, &e[i, 0], d) + _quad_form(r_self, &u_app[i, 0], m)
            lo = indptr[i]
            hi = indptr[i + 1]
            for jj in range(lo, hi):
                a = <int> indices[jj]
                rho += _quad_form(r_nbr, &u_app[a, 0], m)
            rate_log[k, i] = rho
            if k > 0:
                cum[i] = cum[i] + 0.5 * dt * (rate_log[k - 1, i] + rho)
            cost_log[k, i] = cum[i]

        times[k] = t
        for j in range(d):
            leader_log[k, j] = x0[j]
        for i in range(n):
            for j in range(d):
                followers_log[k, i, j] = x[i, j]
                errors_log[k, i, j] = e[i, j]
            for j in range(m):
                controls_log[k, i, j] = u_app[i, j]
            for j in range(kk):
                weights_log[k, i, j] = w[i, j]
        dos_log[k] = 1 if active else 0
        prev_active = active

        if k == n_steps:
            break

        _rk4_step(
            x0, x, u_app, a_sys, b_in, follower_kind, f_amp, f_freq,
            leader_kind, l_drift, l_cos, l_sin, l_freq, dt,
            x0_stage, x_stage, k0_1, k0_2, k0_3, k0_4, kx_1, kx_2, kx_3, kx_4,
            n, d, m,
        )
        finite_ok = True
        for j in range(d):
            if not isfinite(x0[j]):
                finite_ok = False
        for i in range(n):
            for j in range(d):
                if not isfinite(x[i, j]):
                    finite_ok = False
        if not finite_ok:
            diverged = True
            divergence_step = k + 1
            rows = k + 1
            break

    return StepResult(
        times=times_np[:rows],
        leader=leader_np[:rows],
        followers=followers_np[:rows],
        errors=errors_np[:rows],
        controls=controls_np[:rows],
        delta_norms=delta_np[:rows],
        weights=weights_np[:rows],
        cost_rates=rate_np[:rows],
        cum_costs=cost_np[:rows],
        dos_active=dos_np[:rows].astype(bool),
        trigger_steps=np.array(trig_steps, dtype=np.int64),
        trigger_agents=np.array(trig_agents, dtype=np.int64),
        diverged=bool(diverged),
        divergence_step=int(divergence_step) if diverged else None,
    )


cdef void _compute_errors(double[:, ::1] x, double[::1] x0, double[:, ::1] offsets,
                          long[::1] indptr, long[::1] indices, double[::1] nbr_w,
                          double[::1] pinning, double[::1] kappa,
                          double[:, ::1] e, int n, int d) noexcept:
    # e_i = d_i z_i - sum_j a_ij z_j + b_i (z_i - x0), z = x - offsets
    cdef int i, j
    cdef long lo, hi, jj
    cdef int a
    cdef double zi, zj
    for i in range(n):
        lo = indptr[i]
        hi = indptr[i + 1]
        for j in range(d):
            zi = x[i, j] - offsets[i, j]
            e[i, j] = kappa[i] * zi - pinning[i] * x0[j]
        for jj in range(lo, hi):
            a = <int> indices[jj]
            for j in range(d):
                zj = x[a, j] - offsets[a, j]
                e[i, j] = e[i, j] - nbr_w[jj] * zj


cdef void _follower_drift(int kind, double amp, double freq, double[:, ::1] x,
                          double[:, ::1] out, int n, int d) noexcept:
    cdef int i, j
    if kind == FOLLOWER_ZERO:
        for i in range(n):
            for j in range(d):
                out[i, j] = 0.0
    else:
        for i in range(n):
            for j in range(d):
                out[i, j] = amp * sin(freq * x[i, j])


cdef void _leader_drift(int kind, double drift, double camp, double samp, double sfreq,
                        double[::1] x0, double[::1] out, int d) noexcept:
    cdef int j
    if kind == LEADER_ZERO:
        for j in range(d):
            out[j] = 0.0
    else:
        out[0] = drift
        out[1] = camp * cos(x0[0]) + samp * sin(sfreq * x0[0])
        for j in range(2, d):
            out[j] = 0.0


cdef void _update_and_refresh(
    int i, double[:, ::1] e, double[:, ::1] x, double[::1] x0,
    double[:, ::1] f_x, double[::1] f0, double[::1] ax0,
    double[:, ::1] u_prev, double[:, ::1] w, double[:, ::1] e_held,
    double[:, ::1] u_held, double[:, ::1] a_sys, double[:, ::1] b_in,
    double[:, ::1] q, double[:, ::1] r_self, double[:, ::1] r_nbr,
    double[:, :, ::1] gain, double[:, ::1] c_vec, double[::1] kappa,
    double[::1] pinning, long[::1] indptr, long[::1] indices, double[::1] nbr_w,
    int basis_kind, double[:, ::1] hidden, double alpha, bint normalize,
    double[:, ::1] jac, double[::1] edot, double[::1] sigma, double[::1] grad,
    double[::1] uf, double[::1] tmp_m, double[::1] scratch_d,
    int n, int d, int m, int kk,
) noexcept:
    # Fresh own control at the current error, previous-snapshot neighbors.
    cdef int j, c, a
    cdef long lo, hi, jj
    cdef double acc, rho, residual, rate_step, den

    _jacobian(basis_kind, hidden, &e[i, 0], d, kk, jac)
    # grad = jac^T w_i ; u_fresh = gain_i grad
    for j in range(d):
        acc = 0.0
        for c in range(kk):
            acc += jac[c, j] * w[i, c]
        grad[j] = acc
    for j in range(m):
        acc = 0.0
        for c in range(d):
            acc += gain[i, j, c] * grad[c]
        uf[j] = acc

    # edot = A e_i + kappa_i B u_fresh + c_vec_i + pinning_i A x0
    _matvec(a_sys, &e[i, 0], &edot[0], d, d)
    _matvec(b_in, &uf[0], &scratch_d[0], d, m)
    for j in range(d):
        edot[j] += kappa[i] * scratch_d[j] + c_vec[i, j] + pinning[i] * ax0[j]
        edot[j] += pinning[i] * (f_x[i, j] - f0[j])
    rho = 0.0
    lo = indptr[i]
    hi = indptr[i + 1]
    for jj in range(lo, hi):
        a = <int> indices[jj]
        for j in range(m):
            tmp_m[j] = u_prev[a, j]
        _matvec(b_in, &tmp_m[0], &scratch_d[0], d, m)
        for j in range(d):
            edot[j] += -nbr_w[jj] * scratch_d[j] + nbr_w[jj] * (f_x[i, j] - f_x[a, j])
        rho += _quad_form(r_nbr, &u_prev[a, 0], m)

    # sigma = jac edot ; residual = sigma.w + cost rate
    for c in range(kk):
        acc = 0.0
        for j in range(d):
            acc += jac[c, j] * edot[j]
        sigma[c] = acc
    rho += _quad_form(q, &e[i, 0], d) + _quad_form(r_self, &uf[0], m)
    residual = rho
    for c in range(kk):
        residual += sigma[c] * w[i, c]
    rate_step = alpha
    if normalize:
        den = 1.0
        for c in range(kk):
            den += sigma[c] * sigma[c]
        rate_step = alpha / (den * den)
    for c in range(kk):
        w[i, c] = w[i, c] - rate_step * residual * sigma[c]

    # refresh holds from the updated weights
    for j in range(d):
        e_held[i, j] = e[i, j]
    for j in range(d):
        acc = 0.0
        for c in range(kk):
            acc += jac[c, j] * w[i, c]
        grad[j] = acc
    for j in range(m):
        acc = 0.0
        for c in range(d):
            acc += gain[i, j, c] * grad[c]
        u_held[i, j] = acc


cdef void _deriv(double[::1] x0, double[:, ::1] x, double[:, ::1] u,
                 double[:, ::1] a_sys, double[:, ::1] b_in,
                 int f_kind, double f_amp, double f_freq,
                 int l_kind, double l_drift, double l_cos, double l_sin, double l_freq,
                 double[::1] dx0, double[:, ::1] dx, int n, int d, int m) noexcept:
    cdef int i, j, c
    cdef double acc
    _leader_drift(l_kind, l_drift, l_cos, l_sin, l_freq, x0, dx0, d)
    for i in range(n):
        for j in range(d):
            acc = 0.0
            for c in range(d):
                acc += a_sys[j, c] * x[i, c]
            for c in range(m):
                acc += b_in[j, c] * u[i, c]
            if f_kind == FOLLOWER_SIN:
                acc += f_amp * sin(f_freq * x[i, j])
            dx[i, j] = acc


cdef void _rk4_step(double[::1] x0, double[:, ::1] x, double[:, ::1] u,
                    double[:, ::1] a_sys, double[:, ::1] b_in,
                    int f_kind, double f_amp, double f_freq,
                    int l_kind, double l_drift, double l_cos, double l_sin, double l_freq,
                    double dt, double[::1] x0_stage, double[:, ::1] x_stage,
                    double[::1] k0_1, double[::1] k0_2, double[::1] k0_3, double[::1] k0_4,
                    double[:, ::1] kx_1, double[:, ::1] kx_2, double[:, ::1] kx_3,
                    double[:, ::1] kx_4, int n, int d, int m) noexcept:
    cdef int i, j
    cdef double h = dt

    _deriv(x0, x, u, a_sys, b_in, f_kind, f_amp, f_freq,
           l_kind, l_drift, l_cos, l_sin, l_freq, k0_1, kx_1, n, d, m)
    for j in range(d):
        x0_stage[j] = x0[j] + 0.5 * h * k0_1[j]
    for i in range(n):
        for j in range(d):
            x_stage[i, j] = x[i, j] + 0.5 * h * kx_1[i, j]
    _deriv(x0_stage, x_stage, u, a_sys, b_in, f_kind, f_amp, f_freq,
           l_kind, l_drift, l_cos, l_sin, l_freq, k0_2, kx_2, n, d, m)
    for j in range(d):
        x0_stage[j] = x0[j] + 0.5 * h * k0_2[j]
    for i in range(n):
        for j in range(d):
            x_stage[i, j] = x[i, j] + 0.5 * h * kx_2[i, j]
    _deriv(x0_stage, x_stage, u, a_sys, b_in, f_kind, f_amp, f_freq,
           l_kind, l_drift, l_cos, l_sin, l_freq, k0_3, kx_3, n, d, m)
    for j in range(d):
        x0_stage[j] = x0[j] + h * k0_3[j]
    for i in range(n):
        for j in range(d):
            x_stage[i, j] = x[i, j] + h * kx_3[i, j]
    _deriv(x0_stage, x_stage, u, a_sys, b_in, f_kind, f_amp, f_freq,
           l_kind, l_drift, l_cos, l_sin, l_freq, k0_4, kx_4, n, d, m)

    for j in range(d):
        x0[j] = x0[j] + (h / 6.0) * (k0_1[j] + 2.0 * k0_2[j] + 2.0 * k0_3[j] + k0_4[j])
    for i in range(n):
        for j in range(d):
            x[i, j] = x[i, j] + (h / 6.0) * (
                kx_1[i, j] + 2.0 * kx_2[i, j] + 2.0 * kx_3[i, j] + kx_4[i, j]
            )
