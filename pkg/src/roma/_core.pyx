# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-candidate kernels.

Every routine takes a stack of flat parameter vectors ``theta[c, :]`` laid
out as in :mod:`roma.proxy` and processes each candidate independently.
The pure-numpy twin lives in :mod:`roma._core_py`; both expose the same
functions with the same signatures.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, log1p, sqrt, isfinite
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy, memset

cnp.import_array()

ctypedef Py_ssize_t isz


cdef struct Layout:
    int L
    isz d
    isz P
    isz nh           # total hidden units
    isz maxw
    isz* sz          # L + 1 widths
    isz* off         # L + 1 parameter offsets
    isz* hoff        # L - 1 hidden offsets (+1 sentinel)


cdef struct Work:
    double* A
    double* H
    double* S
    double* Q
    double* R
    double* PSI
    double* D
    double* B
    double* g
    double* v
    double* chi
    double* dh0
    double* dh1


cdef int _layout_init(Layout* lo, const isz[::1] sizes) except -1:
    cdef int k
    lo.L = <int>(sizes.shape[0] - 1)
    lo.sz = <isz*>malloc((lo.L + 1) * sizeof(isz))
    lo.off = <isz*>malloc((lo.L + 1) * sizeof(isz))
    lo.hoff = <isz*>malloc((lo.L + 1) * sizeof(isz))
    if lo.sz == NULL or lo.off == NULL or lo.hoff == NULL:
        raise MemoryError()
    lo.maxw = 1
    for k in range(lo.L + 1):
        lo.sz[k] = sizes[k]
        if sizes[k] > lo.maxw:
            lo.maxw = sizes[k]
    lo.d = lo.sz[0]
    lo.off[0] = 0
    for k in range(lo.L):
        lo.off[k + 1] = lo.off[k] + lo.sz[k + 1] * (lo.sz[k] + 1)
    lo.P = lo.off[lo.L]
    lo.hoff[0] = 0
    for k in range(lo.L - 1):
        lo.hoff[k + 1] = lo.hoff[k] + lo.sz[k + 1]
    lo.nh = lo.hoff[lo.L - 1] if lo.L > 1 else 0
    return 0


cdef void _layout_free(Layout* lo) noexcept:
    free(lo.sz)
    free(lo.off)
    free(lo.hoff)


cdef double* _work_init(Work* w, Layout* lo) except NULL:
    cdef isz nh = lo.nh if lo.nh > 0 else 1
    cdef isz total = 8 * nh + 2 * lo.d + 3 * lo.maxw
    cdef double* buf = <double*>malloc(total * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    w.A = buf
    w.H = w.A + nh
    w.S = w.H + nh
    w.Q = w.S + nh
    w.R = w.Q + nh
    w.PSI = w.R + nh
    w.D = w.PSI + nh
    w.B = w.D + nh
    w.g = w.B + nh
    w.v = w.g + lo.d
    w.chi = w.v + lo.d
    w.dh0 = w.chi + lo.maxw
    w.dh1 = w.dh0 + lo.maxw
    return buf


cdef double _forward_backward(const double* th, Layout* lo, Work* w,
                              const double* x) noexcept nogil:
    """Forward pass, output sensitivities R and input gradient g; returns f."""
    cdef int L = lo.L
    cdef int k
    cdef isz i, j, n_in, n_out
    cdef const double* W
    cdef const double* b
    cdef const double* inp = x
    cdef double* a
    cdef double* h
    cdef double* s
    cdef double* q
    cdef double* r
    cdef double acc, ri, f, e
    for k in range(L - 1):
        n_in = lo.sz[k]
        n_out = lo.sz[k + 1]
        W = th + lo.off[k]
        b = W + n_out * n_in
        a = w.A + lo.hoff[k]
        h = w.H + lo.hoff[k]
        s = w.S + lo.hoff[k]
        for i in range(n_out):
            acc = b[i]
            for j in range(n_in):
                acc += W[i * n_in + j] * inp[j]
            a[i] = acc
        # softplus and its derivative share exp(-|a|)
        for i in range(n_out):
            acc = a[i]
            e = exp(-fabs(acc))
            h[i] = (acc if acc > 0 else 0.0) + log1p(e)
            s[i] = 1.0 / (1.0 + e) if acc >= 0 else e / (1.0 + e)
        inp = h
    n_in = lo.sz[L - 1]
    W = th + lo.off[L - 1]
    f = W[n_in]
    for j in range(n_in):
        f += W[j] * inp[j]

    if L == 1:
        for j in range(lo.d):
            w.g[j] = W[j]
        return f
    for k in range(L - 2, -1, -1):
        n_out = lo.sz[k + 1]
        q = w.Q + lo.hoff[k]
        r = w.R + lo.hoff[k]
        s = w.S + lo.hoff[k]
        if k == L - 2:
            W = th + lo.off[L - 1]
            for j in range(n_out):
                q[j] = W[j]
        else:
            memset(q, 0, n_out * sizeof(double))
            W = th + lo.off[k + 1]
            for i in range(lo.sz[k + 2]):
                ri = w.R[lo.hoff[k + 1] + i]
                for j in range(n_out):
                    q[j] += W[i * n_out + j] * ri
        for j in range(n_out):
            r[j] = q[j] * s[j]
    memset(w.g, 0, lo.d * sizeof(double))
    W = th
    r = w.R
    for i in range(lo.sz[1]):
        ri = r[i]
        for j in range(lo.d):
            w.g[j] += W[i * lo.d + j] * ri
    return f


cdef double _adapt_eval(const double* th, Layout* lo, Work* w, const double* x,
                        double f_prev, double alpha, double gweight, double eps_num,
                        double* grad) noexcept nogil:
    """Adaptation objective at one input; writes its parameter gradient."""
    cdef int L = lo.L
    cdef int k
    cdef isz i, j, n_in, n_out, n_next
    cdef double f, gn2, nrm, c, value, e, acc, ri
    cdef const double* W
    cdef const double* hin
    cdef double* gW
    cdef double* psi
    cdef double* s
    cdef double* q
    cdef double* r
    cdef double* dcur
    cdef double* dnext
    cdef double* tmp
    cdef double* bk

    f = _forward_backward(th, lo, w, x)
    gn2 = 0.0
    for j in range(lo.d):
        gn2 += w.g[j] * w.g[j]
    nrm = sqrt(gn2 + eps_num)
    c = 2.0 * alpha * (f - f_prev)
    value = gweight * nrm + alpha * (f - f_prev) * (f - f_prev)
    memset(grad, 0, lo.P * sizeof(double))

    if gweight != 0.0:
        for j in range(lo.d):
            w.v[j] = gweight * w.g[j] / nrm
        gW = grad
        W = th
        if L == 1:
            for j in range(lo.d):
                gW[j] += w.v[j]
        else:
            # reverse of g = W0^T rho0
            psi = w.PSI
            for i in range(lo.sz[1]):
                ri = w.R[i]
                acc = 0.0
                for j in range(lo.d):
                    gW[i * lo.d + j] += ri * w.v[j]
                    acc += W[i * lo.d + j] * w.v[j]
                psi[i] = acc
            # reverse of rho_k = q_k * s_k and q_k = W_{k+1}^T rho_{k+1}
            for k in range(L - 1):
                n_out = lo.sz[k + 1]
                psi = w.PSI + lo.hoff[k]
                s = w.S + lo.hoff[k]
                q = w.Q + lo.hoff[k]
                for j in range(n_out):
                    w.chi[j] = psi[j] * s[j]
                    w.D[lo.hoff[k] + j] = psi[j] * q[j] * s[j] * (1.0 - s[j])
                gW = grad + lo.off[k + 1]
                W = th + lo.off[k + 1]
                if k + 1 == L - 1:
                    for j in range(n_out):
                        gW[j] += w.chi[j]
                else:
                    n_next = lo.sz[k + 2]
                    r = w.R + lo.hoff[k + 1]
                    for i in range(n_next):
                        ri = r[i]
                        acc = 0.0
                        for j in range(n_out):
                            gW[i * n_out + j] += ri * w.chi[j]
                            acc += W[i * n_out + j] * w.chi[j]
                        w.PSI[lo.hoff[k + 1] + i] = acc
            # reverse of the forward chain, seeded by the direct terms
            dcur = w.dh0
            dnext = w.dh1
            memset(dcur, 0, lo.sz[L - 1] * sizeof(double))
            for k in range(L - 2, -1, -1):
                n_out = lo.sz[k + 1]
                s = w.S + lo.hoff[k]
                bk = w.B + lo.hoff[k]
                for j in range(n_out):
                    bk[j] = dcur[j] * s[j] + w.D[lo.hoff[k] + j]
                if k > 0:
                    n_in = lo.sz[k]
                    W = th + lo.off[k]
                    memset(dnext, 0, n_in * sizeof(double))
                    for i in range(n_out):
                        e = bk[i]
                        for j in range(n_in):
                            dnext[j] += W[i * n_in + j] * e
                    tmp = dcur
                    dcur = dnext
                    dnext = tmp
    else:
        if L > 1:
            memset(w.B, 0, lo.nh * sizeof(double))

    if alpha != 0.0:
        n_in = lo.sz[L - 1]
        gW = grad + lo.off[L - 1]
        hin = x if L == 1 else w.H + lo.hoff[L - 2]
        for j in range(n_in):
            gW[j] += c * hin[j]
        gW[n_in] += c

    if L > 1 and (gweight != 0.0 or alpha != 0.0):
        for k in range(L - 1):
            n_out = lo.sz[k + 1]
            n_in = lo.sz[k]
            gW = grad + lo.off[k]
            hin = x if k == 0 else w.H + lo.hoff[k - 1]
            for i in range(n_out):
                e = w.B[lo.hoff[k] + i] + c * w.R[lo.hoff[k] + i]
                if e != 0.0:
                    for j in range(n_in):
                        gW[i * n_in + j] += e * hin[j]
                gW[n_out * n_in + i] += e
    return value


def value_input_grad(const double[:, ::1] theta, const isz[::1] sizes, const double[:, ::1] X):
    """Per-candidate proxy score and input gradient: ``(f (C,), G (C, d))``."""
    cdef Layout lo
    cdef Work w
    cdef double* buf
    cdef isz c, j, C = theta.shape[0]
    _layout_init(&lo, sizes)
    if theta.shape[1] != lo.P or X.shape[0] != C or X.shape[1] != lo.d:
        _layout_free(&lo)
        raise ValueError("shape mismatch between parameters, sizes and inputs")
    f_out = np.empty(C)
    g_out = np.empty((C, lo.d))
    cdef double[::1] fv = f_out
    cdef double[:, ::1] gv = g_out
    buf = _work_init(&w, &lo)
    with nogil:
        for c in range(C):
            fv[c] = _forward_backward(&theta[c, 0], &lo, &w, &X[c, 0])
            for j in range(lo.d):
                gv[c, j] = w.g[j]
    free(buf)
    _layout_free(&lo)
    return f_out, g_out


def adapt_value_grad(const double[:, ::1] theta, const isz[::1] sizes, const double[:, ::1] X,
                     const double[::1] f_prev, double alpha, double grad_weight,
                     double eps_num):
    """Adaptation objective and its gradient for every candidate."""
    cdef Layout lo
    cdef Work w
    cdef double* buf
    cdef isz c, C = theta.shape[0]
    _layout_init(&lo, sizes)
    if theta.shape[1] != lo.P or X.shape[0] != C or X.shape[1] != lo.d or f_prev.shape[0] != C:
        _layout_free(&lo)
        raise ValueError("shape mismatch between parameters, sizes and inputs")
    val = np.empty(C)
    grad = np.empty((C, lo.P))
    cdef double[::1] vv = val
    cdef double[:, ::1] gv = grad
    buf = _work_init(&w, &lo)
    with nogil:
        for c in range(C):
            vv[c] = _adapt_eval(&theta[c, 0], &lo, &w, &X[c, 0], f_prev[c],
                                alpha, grad_weight, eps_num, &gv[c, 0])
    free(buf)
    _layout_free(&lo)
    return val, grad


def adapt_pgd(const double[::1] anchor, const isz[::1] sizes, const double[:, ::1] start,
              const double[:, ::1] X, const double[::1] f_prev, double alpha, double grad_weight,
              double epsilon, double step, int n_steps, double eps_num,
              bint track=False):
    """Projected descent on the adaptation objective, one candidate at a time.

    Each PGD iteration moves every layer block by ``step * |theta_k|`` along
    the normalised negative gradient and projects the offset back onto the
    ball of radius ``epsilon * |theta_k|``.  The lowest-objective iterate
    (warm start included) is returned.

    Returns ``(theta_out, j_start, j_best, status, max_excess)``; ``status``
    is 1 where the objective turned non-finite (warm start returned) and
    ``max_excess`` is the largest ``|phi_k| - radius_k`` seen when ``track``.
    """
    cdef Layout lo
    cdef Work w
    cdef double* buf
    cdef double* cur
    cdef double* grad
    cdef double* ref
    cdef isz c, p, k, C = start.shape[0]
    cdef int it
    cdef double J, best, gn, coef, nphi, radius, scale, phi, excess, n2
    _layout_init(&lo, sizes)
    if (anchor.shape[0] != lo.P or start.shape[1] != lo.P or X.shape[0] != C
            or X.shape[1] != lo.d or f_prev.shape[0] != C):
        _layout_free(&lo)
        raise ValueError("shape mismatch between parameters, sizes and inputs")
    out = np.array(start, copy=True)
    j_start = np.empty(C)
    j_best = np.empty(C)
    status = np.zeros(C, dtype=np.int8)
    max_excess = np.full(C, -np.inf)
    cdef double[:, ::1] ov = out
    cdef double[::1] jsv = j_start
    cdef double[::1] jbv = j_best
    cdef signed char[::1] stv = status
    cdef double[::1] mev = max_excess
    buf = _work_init(&w, &lo)
    cur = <double*>malloc(2 * lo.P * sizeof(double))
    ref = <double*>malloc(lo.L * sizeof(double))
    if cur == NULL or ref == NULL:
        free(buf); free(cur); free(ref); _layout_free(&lo)
        raise MemoryError()
    grad = cur + lo.P
    for k in range(lo.L):
        n2 = 0.0
        for p in range(lo.off[k], lo.off[k + 1]):
            n2 += anchor[p] * anchor[p]
        ref[k] = sqrt(n2)
    with nogil:
        for c in range(C):
            memcpy(cur, &start[c, 0], lo.P * sizeof(double))
            best = 0.0
            for it in range(n_steps + 1):
                J = _adapt_eval(cur, &lo, &w, &X[c, 0], f_prev[c], alpha,
                                grad_weight, eps_num, grad)
                if not isfinite(J):
                    stv[c] = 1
                    memcpy(&ov[c, 0], &start[c, 0], lo.P * sizeof(double))
                    if it == 0:
                        jsv[c] = J
                    jbv[c] = J
                    break
                if it == 0:
                    jsv[c] = J
                    best = J
                elif J < best:
                    best = J
                    memcpy(&ov[c, 0], cur, lo.P * sizeof(double))
                jbv[c] = best
                if it == n_steps:
                    break
                for k in range(lo.L):
                    gn = 0.0
                    for p in range(lo.off[k], lo.off[k + 1]):
                        gn += grad[p] * grad[p]
                    if gn == 0.0:
                        continue
                    gn = sqrt(gn)
                    coef = step * ref[k] / gn
                    n2 = 0.0
                    for p in range(lo.off[k], lo.off[k + 1]):
                        phi = (cur[p] - anchor[p]) - coef * grad[p]
                        grad[p] = phi
                        n2 += phi * phi
                    nphi = sqrt(n2)
                    radius = epsilon * ref[k]
                    if nphi > radius:
                        scale = radius / nphi
                        for p in range(lo.off[k], lo.off[k + 1]):
                            cur[p] = anchor[p] + grad[p] * scale
                    else:
                        for p in range(lo.off[k], lo.off[k + 1]):
                            cur[p] = anchor[p] + grad[p]
                    if track:
                        n2 = 0.0
                        for p in range(lo.off[k], lo.off[k + 1]):
                            phi = cur[p] - anchor[p]
                            n2 += phi * phi
                        excess = sqrt(n2) - radius
                        if excess > mev[c]:
                            mev[c] = excess
    free(cur)
    free(ref)
    free(buf)
    _layout_free(&lo)
    return out, j_start, j_best, status, max_excess
