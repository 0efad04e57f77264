#pragma once

#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "petrec/core.hpp"
#include "petrec/kernels.hpp"

// Define-by-run reverse-mode tape over Tensor values. Every op appends a
// node holding the result plus a closure that scatters the node's adjoint
// into its inputs; closures capture node ids and read values back from the
// tape, so tensors are stored exactly once. A reverse sweep over creation
// order is a valid topological order by construction.

namespace petrec::ad {

class Tape;

class Var {
  public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    int id() const { return id_; }
    Tape* tape() const { return tape_; }
    bool valid() const { return tape_ != nullptr; }
    const Tensor& value() const;
    const Tensor& grad() const;
    bool requires_grad() const;

  private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

class Tape {
  public:
    using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

    Var leaf(Tensor v, bool requires_grad = true) {
        nodes_.push_back({std::move(v), Tensor{}, requires_grad, nullptr});
        return {this, static_cast<int>(nodes_.size()) - 1};
    }

    Var constant(Tensor v) { return leaf(std::move(v), false); }

    Var emit(Tensor v, bool requires_grad, BackwardFn fn) {
        nodes_.push_back({std::move(v), Tensor{}, requires_grad,
                          requires_grad ? std::move(fn) : nullptr});
        return {this, static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& val(int id) const { return nodes_[id].value; }
    const Tensor& grad(int id) const { return nodes_[id].grad; }
    bool requires_grad(int id) const { return nodes_[id].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    /// Adds `g` to a node's adjoint. Reduces to a scalar when the node was
    /// broadcast, ignores nodes outside the differentiated subgraph.
    void accum(int id, const Tensor& g) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return;
        if (n.grad.data.empty()) n.grad = Tensor(n.value.shape);
        if (n.value.numel() == 1 && g.numel() > 1) {
            n.grad[0] += g.sum();
            return;
        }
        check(g.numel() == n.value.numel(), "accum: adjoint shape mismatch");
        for (std::size_t i = 0; i < g.numel(); ++i) n.grad[i] += g[i];
    }

    void backward(const Var& loss) {
        check(loss.tape() == this, "backward: var from another tape");
        check(val(loss.id()).numel() == 1, "backward: loss must be scalar");
        accum(loss.id(), Tensor({1}, 1.0));
        for (int id = loss.id(); id >= 0; --id) {
            Node& n = nodes_[id];
            if (n.backward && !n.grad.data.empty()) n.backward(*this, n.grad);
        }
    }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    // deque keeps node references stable while new nodes are emitted, so
    // `Var::value()` results may be held across subsequent ops
    std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->val(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

inline void same_tape(const Var& a, const Var& b) {
    check(a.tape() == b.tape(), "op: vars from different tapes");
}

// Elementwise binary with scalar broadcast on either side.
template <class F>
Tensor bcast_apply(const Tensor& a, const Tensor& b, F f) {
    if (a.same_shape(b)) {
        Tensor out(a.shape);
        for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
        return out;
    }
    if (a.numel() == 1) {
        Tensor out(b.shape);
        for (std::size_t i = 0; i < b.numel(); ++i) out[i] = f(a[0], b[i]);
        return out;
    }
    if (b.numel() == 1) {
        Tensor out(a.shape);
        for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[0]);
        return out;
    }
    check(false, "op: incompatible shapes");
    return {};
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    Tape& t = *a.tape();
    Tensor out = detail::bcast_apply(a.value(), b.value(), [](double x, double y) { return x + y; });
    const int ia = a.id(), ib = b.id();
    return t.emit(std::move(out), a.requires_grad() || b.requires_grad(),
                  [ia, ib](Tape& tp, const Tensor& g) {
                      tp.accum(ia, g);
                      tp.accum(ib, g);
                  });
}

inline Var sub(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    Tape& t = *a.tape();
    Tensor out = detail::bcast_apply(a.value(), b.value(), [](double x, double y) { return x - y; });
    const int ia = a.id(), ib = b.id();
    return t.emit(std::move(out), a.requires_grad() || b.requires_grad(),
                  [ia, ib](Tape& tp, const Tensor& g) {
                      tp.accum(ia, g);
                      tp.accum(ib, kernels::scale(g, -1.0));
                  });
}

inline Var mul(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    Tape& t = *a.tape();
    Tensor out = detail::bcast_apply(a.value(), b.value(), [](double x, double y) { return x * y; });
    const int ia = a.id(), ib = b.id();
    return t.emit(std::move(out), a.requires_grad() || b.requires_grad(),
                  [ia, ib](Tape& tp, const Tensor& g) {
                      tp.accum(ia, detail::bcast_apply(g, tp.val(ib),
                                                       [](double x, double y) { return x * y; }));
                      tp.accum(ib, detail::bcast_apply(g, tp.val(ia),
                                                       [](double x, double y) { return x * y; }));
                  });
}

inline Var div(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    Tape& t = *a.tape();
    const bool diff = a.requires_grad() || b.requires_grad();
    if (diff)
        for (std::size_t i = 0; i < b.value().numel(); ++i)
            check(b.value()[i] != 0.0, "div: zero denominator in differentiated graph");
    Tensor out = detail::bcast_apply(a.value(), b.value(), [](double x, double y) { return x / y; });
    const int ia = a.id(), ib = b.id(), io = static_cast<int>(t.size());
    return t.emit(std::move(out), diff, [ia, ib, io](Tape& tp, const Tensor& g) {
        tp.accum(ia, detail::bcast_apply(g, tp.val(ib), [](double x, double y) { return x / y; }));
        Tensor q = detail::bcast_apply(tp.val(io), tp.val(ib),
                                       [](double o, double y) { return -o / y; });
        tp.accum(ib, detail::bcast_apply(g, q, [](double x, double y) { return x * y; }));
    });
}

inline Var scale(const Var& a, double c) {
    Tape& t = *a.tape();
    const int ia = a.id();
    return t.emit(kernels::scale(a.value(), c), a.requires_grad(),
                  [ia, c](Tape& tp, const Tensor& g) { tp.accum(ia, kernels::scale(g, c)); });
}

inline Var vexp(const Var& a) {
    Tape& t = *a.tape();
    const int ia = a.id(), io = static_cast<int>(t.size());
    return t.emit(kernels::ewise_exp(a.value()), a.requires_grad(),
                  [ia, io](Tape& tp, const Tensor& g) {
                      tp.accum(ia, kernels::ewise_mul(g, tp.val(io)));
                  });
}

inline Var vsum(const Var& a) {
    Tape& t = *a.tape();
    const int ia = a.id();
    const std::vector<int> shape = a.value().shape;
    return t.emit(Tensor({1}, a.value().sum()), a.requires_grad(),
                  [ia, shape](Tape& tp, const Tensor& g) {
                      tp.accum(ia, Tensor(shape, g[0]));
                  });
}

inline Var vdot(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    Tape& t = *a.tape();
    const int ia = a.id(), ib = b.id();
    return t.emit(Tensor({1}, dot(a.value(), b.value())),
                  a.requires_grad() || b.requires_grad(),
                  [ia, ib](Tape& tp, const Tensor& g) {
                      tp.accum(ia, kernels::scale(tp.val(ib), g[0]));
                      tp.accum(ib, kernels::scale(tp.val(ia), g[0]));
                  });
}

/// y = Mx (or M^T x). The matrix is constant; it must outlive the tape.
inline Var matvec(const Var& x, const CsrMatrix& m, bool transpose, std::vector<int> out_shape) {
    Tape& t = *x.tape();
    const int ix = x.id();
    const CsrMatrix* mp = &m;
    const std::vector<int> in_shape = x.value().shape;
    Tensor out = kernels::matvec(m, x.value(), transpose, out_shape);
    return t.emit(std::move(out), x.requires_grad(),
                  [ix, mp, transpose, in_shape](Tape& tp, const Tensor& g) {
                      tp.accum(ix, kernels::matvec(*mp, g, !transpose, in_shape));
                  });
}

inline Var conv2d(const Var& x, const Var& k) {
    detail::same_tape(x, k);
    Tape& t = *x.tape();
    const int ix = x.id(), ik = k.id();
    const int kh = k.value().shape[2], kw = k.value().shape[3];
    return t.emit(kernels::conv2d(x.value(), k.value()),
                  x.requires_grad() || k.requires_grad(),
                  [ix, ik, kh, kw](Tape& tp, const Tensor& g) {
                      tp.accum(ix, kernels::conv2d_adj_input(g, tp.val(ik)));
                      tp.accum(ik, kernels::conv2d_kernel_grad(g, tp.val(ix), kh, kw));
                  });
}

/// conv2d's input-adjoint as a forward op (used when a gradient expression
/// is itself recorded); its own adjoints are conv2d and the kernel-gradient
/// with the roles of signal and adjoint swapped.
inline Var conv2d_adj_input(const Var& g, const Var& k) {
    detail::same_tape(g, k);
    Tape& t = *g.tape();
    const int ig = g.id(), ik = k.id();
    const int kh = k.value().shape[2], kw = k.value().shape[3];
    return t.emit(kernels::conv2d_adj_input(g.value(), k.value()),
                  g.requires_grad() || k.requires_grad(),
                  [ig, ik, kh, kw](Tape& tp, const Tensor& gr) {
                      tp.accum(ig, kernels::conv2d(gr, tp.val(ik)));
                      tp.accum(ik, kernels::conv2d_kernel_grad(tp.val(ig), gr, kh, kw));
                  });
}

inline Var reshape(const Var& a, std::vector<int> shape) {
    Tape& t = *a.tape();
    const int ia = a.id();
    Tensor out = a.value();
    const std::vector<int> in_shape = out.shape;
    out.shape = std::move(shape);
    check(out.numel() == Tensor::numel_of(out.shape), "reshape: element count mismatch");
    return t.emit(std::move(out), a.requires_grad(),
                  [ia, in_shape](Tape& tp, const Tensor& g) {
                      Tensor back = g;
                      back.shape = in_shape;
                      tp.accum(ia, back);
                  });
}

inline Var srelu(const Var& a, double delta) {
    Tape& t = *a.tape();
    const int ia = a.id();
    return t.emit(kernels::srelu(a.value(), delta), a.requires_grad(),
                  [ia, delta](Tape& tp, const Tensor& g) {
                      tp.accum(ia, kernels::ewise_mul(g, kernels::srelu_deriv(tp.val(ia), delta)));
                  });
}

/// sigma'(a) as a tape op; differentiating it brings in sigma'' (piecewise
/// constant), which is what second-order terms of the penalty need.
inline Var srelu_deriv(const Var& a, double delta) {
    Tape& t = *a.tape();
    const int ia = a.id();
    return t.emit(kernels::srelu_deriv(a.value(), delta), a.requires_grad(),
                  [ia, delta](Tape& tp, const Tensor& g) {
                      const Tensor& x = tp.val(ia);
                      Tensor out(x.shape);
                      for (std::size_t i = 0; i < x.numel(); ++i)
                          out[i] = g[i] * kernels::srelu_second(x[i], delta);
                      tp.accum(ia, out);
                  });
}

/// Per-position channel norm, fused so the adjoint g*x/n is well defined
/// (zero) at n = 0 instead of 0 * inf.
inline Var channel_l2norm(const Var& a) {
    Tape& t = *a.tape();
    const int ia = a.id(), io = static_cast<int>(t.size());
    return t.emit(kernels::channel_l2norm(a.value()), a.requires_grad(),
                  [ia, io](Tape& tp, const Tensor& g) {
                      const Tensor& x = tp.val(ia);
                      const Tensor& n = tp.val(io);
                      kernels::Chw s = kernels::as_chw(x, "channel_l2norm.bwd");
                      Tensor out(x.shape);
                      const std::size_t plane = n.numel();
                      for (int c = 0; c < s.c; ++c)
                          for (std::size_t p = 0; p < plane; ++p)
                              if (n[p] > 0.0)
                                  out.data[c * plane + p] = g[p] * x.data[c * plane + p] / n[p];
                      tp.accum(ia, out);
                  });
}

inline Var channel_broadcast(const Var& a, int channels) {
    Tape& t = *a.tape();
    const int ia = a.id();
    return t.emit(kernels::channel_broadcast(a.value(), channels), a.requires_grad(),
                  [ia](Tape& tp, const Tensor& g) { tp.accum(ia, kernels::channel_sum(g)); });
}

inline Var huber(const Var& a, double eps) {
    Tape& t = *a.tape();
    const int ia = a.id();
    return t.emit(kernels::huber_eps(a.value(), eps), a.requires_grad(),
                  [ia, eps](Tape& tp, const Tensor& g) {
                      const Tensor& x = tp.val(ia);
                      Tensor out(x.shape);
                      for (std::size_t i = 0; i < x.numel(); ++i)
                          out[i] = g[i] * kernels::huber_eps_deriv(x[i], eps);
                      tp.accum(ia, out);
                  });
}

/// max(a, lo) elementwise; the adjoint passes only where a > lo.
inline Var clip_min(const Var& a, double lo) {
    Tape& t = *a.tape();
    const int ia = a.id();
    return t.emit(kernels::clip_min(a.value(), lo), a.requires_grad(),
                  [ia, lo](Tape& tp, const Tensor& g) {
                      const Tensor& x = tp.val(ia);
                      Tensor out(x.shape);
                      for (std::size_t i = 0; i < x.numel(); ++i)
                          out[i] = x[i] > lo ? g[i] : 0.0;
                      tp.accum(ia, out);
                  });
}

inline Var rot90(const Var& a, int quarter_turns) {
    Tape& t = *a.tape();
    const int ia = a.id(), q = ((quarter_turns % 4) + 4) % 4;
    return t.emit(petrec::rot90(a.value(), q), a.requires_grad(),
                  [ia, q](Tape& tp, const Tensor& g) {
                      tp.accum(ia, petrec::rot90(g, (4 - q) % 4));
                  });
}

inline Var rot_bilinear(const Var& a, double angle) {
    Tape& t = *a.tape();
    const int ia = a.id();
    return t.emit(kernels::rot_bilinear(a.value(), angle), a.requires_grad(),
                  [ia, angle](Tape& tp, const Tensor& g) {
                      tp.accum(ia, kernels::rot_bilinear_adjoint(g, angle));
                  });
}

inline Var detach(const Var& a) { return a.tape()->constant(a.value()); }

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }

}  // namespace petrec::ad
