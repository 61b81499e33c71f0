// Copyright (c) 2026 gadlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense tensors. Kernels execute
// eagerly and record a backward closure on a Wengert list; backward() walks
// the list in reverse. A tape is confined to one thread.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gadlab/tensor.hpp"

namespace gadlab::num {

// A trainable or frozen model tensor. The tape accumulates gradients of
// parameters into `grad`; the optimizer only ever applies updates to
// parameters with trainable == true.
template <typename T>
struct ParameterT {
    std::string name;
    TensorT<T> value;
    TensorT<T> grad;
    bool trainable = true;

    ParameterT() = default;
    ParameterT(std::string n, TensorT<T> v, bool train = true)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(train) {}

    void zero_grad() { grad.fill(T(0)); }
};

using Parameter = ParameterT<double>;
using ParameterF = ParameterT<float>;

// Handle to a tape node.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

template <typename T>
class TapeT {
public:
    using Tensor = TensorT<T>;
    using Parameter = ParameterT<T>;

    TapeT() = default;
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    // ---- leaves ------------------------------------------------------

    Var input(Tensor t) { return push(std::move(t), /*needs_grad=*/false); }

    // Frozen parameters are taped without a gradient path; backward skips
    // every computation that only they would have needed.
    Var param(Parameter& p) {
        Node n;
        n.param = &p;
        n.needs_grad = p.trainable;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    // Identity forward, but gradients never propagate past this node.
    Var detach(Var a) { return push(val(a), /*needs_grad=*/false); }

    // ---- kernels -----------------------------------------------------

    Var matmul(Var a, Var b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        require(A.shape().size() == 2 && B.shape().size() == 2 && A.cols() == B.rows(),
                "matmul", A, B);
        Tensor C({A.rows(), B.cols()});
        matmul_acc(A, B, C, false, false);
        const Var out = push(std::move(C), needs(a) || needs(b));
        record(out, [this, a, b, out](const Tensor& g) {
            if (needs(a)) matmul_acc(g, val(b), grad(a), false, true);   // dA += g * B^T
            if (needs(b)) matmul_acc(val(a), g, grad(b), true, false);   // dB += A^T * g
        });
        return out;
    }

    Var transpose(Var a) {
        const Tensor& A = val(a);
        require(A.shape().size() == 2, "transpose", A);
        Tensor C({A.cols(), A.rows()});
        for (int i = 0; i < A.rows(); ++i)
            for (int j = 0; j < A.cols(); ++j) C.at(j, i) = A.at(i, j);
        const Var out = push(std::move(C), needs(a));
        record(out, [this, a](const Tensor& g) {
            Tensor& da = grad(a);
            for (int i = 0; i < g.rows(); ++i)
                for (int j = 0; j < g.cols(); ++j) da.at(j, i) += g.at(i, j);
        });
        return out;
    }

    Var add(Var a, Var b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        require(A.same_shape(B), "add", A, B);
        Tensor C = A;
        T* c = C.values().data();
        const T* pb = B.values().data();
        for (std::size_t i = 0; i < C.size(); ++i) c[i] += pb[i];
        const Var out = push(std::move(C), needs(a) || needs(b));
        record(out, [this, a, b](const Tensor& g) {
            if (needs(a)) axpy(T(1), g, grad(a));
            if (needs(b)) axpy(T(1), g, grad(b));
        });
        return out;
    }

    Var mul(Var a, Var b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        require(A.same_shape(B), "mul", A, B);
        Tensor C = A;
        for (std::size_t i = 0; i < C.size(); ++i) C.values()[i] *= B.values()[i];
        const Var out = push(std::move(C), needs(a) || needs(b));
        record(out, [this, a, b](const Tensor& g) {
            if (needs(a)) {
                Tensor& da = grad(a);
                const Tensor& B = val(b);
                for (std::size_t i = 0; i < g.size(); ++i)
                    da.values()[i] += g.values()[i] * B.values()[i];
            }
            if (needs(b)) {
                Tensor& db = grad(b);
                const Tensor& A = val(a);
                for (std::size_t i = 0; i < g.size(); ++i)
                    db.values()[i] += g.values()[i] * A.values()[i];
            }
        });
        return out;
    }

    Var scale(Var a, T c) {
        Tensor C = val(a);
        for (T& v : C.values()) v *= c;
        const Var out = push(std::move(C), needs(a));
        record(out, [this, a, c](const Tensor& g) { axpy(c, g, grad(a)); });
        return out;
    }

    // Broadcast a 1 x n row vector over every row of a.
    Var add_rows(Var a, Var rowvec) {
        const Tensor& A = val(a);
        const Tensor& V = val(rowvec);
        require(V.rows() == 1 && V.cols() == A.cols(), "add_rows", A, V);
        Tensor C = A;
        for (int i = 0; i < C.rows(); ++i) {
            T* r = C.row_ptr(i);
            const T* v = V.row_ptr(0);
            for (int j = 0; j < C.cols(); ++j) r[j] += v[j];
        }
        const Var out = push(std::move(C), needs(a) || needs(rowvec));
        record(out, [this, a, rowvec](const Tensor& g) {
            if (needs(a)) axpy(T(1), g, grad(a));
            if (needs(rowvec)) {
                Tensor& dv = grad(rowvec);
                for (int i = 0; i < g.rows(); ++i) {
                    const T* r = g.row_ptr(i);
                    for (int j = 0; j < g.cols(); ++j) dv.values()[j] += r[j];
                }
            }
        });
        return out;
    }

    Var softmax_rows(Var a) {
        const Tensor& A = val(a);
        Tensor C = A;
        for (int i = 0; i < C.rows(); ++i) {
            T* r = C.row_ptr(i);
            T m = r[0];
            for (int j = 1; j < C.cols(); ++j) m = std::max(m, r[j]);
            T s = T(0);
            for (int j = 0; j < C.cols(); ++j) {
                r[j] = std::exp(r[j] - m);
                s += r[j];
            }
            const T inv = T(1) / s;
            for (int j = 0; j < C.cols(); ++j) r[j] *= inv;
        }
        const Var out = push(std::move(C), needs(a));
        record(out, [this, a, out](const Tensor& g) {
            const Tensor& Y = val(out);
            Tensor& da = grad(a);
            for (int i = 0; i < Y.rows(); ++i) {
                const T* y = Y.row_ptr(i);
                const T* gi = g.row_ptr(i);
                T dot = T(0);
                for (int j = 0; j < Y.cols(); ++j) dot += gi[j] * y[j];
                T* d = da.row_ptr(i);
                for (int j = 0; j < Y.cols(); ++j) d[j] += y[j] * (gi[j] - dot);
            }
        });
        return out;
    }

    Var layer_norm_rows(Var a, Var gain, Var bias, T eps) {
        const Tensor& A = val(a);
        const Tensor& G = val(gain);
        const Tensor& B = val(bias);
        require(G.rows() == 1 && G.cols() == A.cols(), "layer_norm gain", A, G);
        require(B.rows() == 1 && B.cols() == A.cols(), "layer_norm bias", A, B);
        const int n = A.cols();
        Tensor C({A.rows(), n});
        Tensor xhat({A.rows(), n});
        std::vector<T> inv_std(A.rows());
        for (int i = 0; i < A.rows(); ++i) {
            const T* x = A.row_ptr(i);
            T mean = T(0);
            for (int j = 0; j < n; ++j) mean += x[j];
            mean /= T(n);
            T var = T(0);
            for (int j = 0; j < n; ++j) {
                const T d = x[j] - mean;
                var += d * d;
            }
            var /= T(n);
            const T is = T(1) / std::sqrt(var + eps);
            inv_std[i] = is;
            T* xh = xhat.row_ptr(i);
            T* c = C.row_ptr(i);
            for (int j = 0; j < n; ++j) {
                xh[j] = (x[j] - mean) * is;
                c[j] = xh[j] * G.values()[j] + B.values()[j];
            }
        }
        const Var out = push(std::move(C), needs(a) || needs(gain) || needs(bias));
        record(out, [this, a, gain, bias, xh = std::move(xhat),
                     is = std::move(inv_std)](const Tensor& g) {
            const int n = g.cols();
            if (needs(bias)) {
                Tensor& db = grad(bias);
                for (int i = 0; i < g.rows(); ++i)
                    for (int j = 0; j < n; ++j) db.values()[j] += g.at(i, j);
            }
            if (needs(gain)) {
                Tensor& dg = grad(gain);
                for (int i = 0; i < g.rows(); ++i)
                    for (int j = 0; j < n; ++j) dg.values()[j] += g.at(i, j) * xh.at(i, j);
            }
            if (needs(a)) {
                Tensor& da = grad(a);
                const Tensor& G = val(gain);
                for (int i = 0; i < g.rows(); ++i) {
                    T sum_dy = T(0), sum_dy_xh = T(0);
                    for (int j = 0; j < n; ++j) {
                        const T dy = g.at(i, j) * G.values()[j];
                        sum_dy += dy;
                        sum_dy_xh += dy * xh.at(i, j);
                    }
                    const T inv_n = T(1) / T(n);
                    for (int j = 0; j < n; ++j) {
                        const T dy = g.at(i, j) * G.values()[j];
                        da.at(i, j) += is[i] * (dy - inv_n * sum_dy - xh.at(i, j) * inv_n * sum_dy_xh);
                    }
                }
            }
        });
        return out;
    }

    Var gelu(Var a) {
        const Tensor& A = val(a);
        Tensor C = A;
        for (T& v : C.values()) v = gelu_fwd(v);
        const Var out = push(std::move(C), needs(a));
        record(out, [this, a](const Tensor& g) {
            Tensor& da = grad(a);
            const Tensor& X = val(a);
            for (std::size_t i = 0; i < g.size(); ++i)
                da.values()[i] += g.values()[i] * gelu_grad(X.values()[i]);
        });
        return out;
    }

    // Gather rows of a by index; used for embedding lookup.
    Var gather_rows(Var a, std::vector<int> ids) {
        const Tensor& A = val(a);
        Tensor C({static_cast<int>(ids.size()), A.cols()});
        for (std::size_t r = 0; r < ids.size(); ++r) {
            if (ids[r] < 0 || ids[r] >= A.rows())
                throw UsageError("gather_rows: index " + std::to_string(ids[r]) +
                                 " out of range for " + A.shape_string());
            std::copy_n(A.row_ptr(ids[r]), A.cols(), C.row_ptr(static_cast<int>(r)));
        }
        const Var out = push(std::move(C), needs(a));
        record(out, [this, a, ids = std::move(ids)](const Tensor& g) {
            Tensor& da = grad(a);
            for (std::size_t r = 0; r < ids.size(); ++r) {
                const T* src = g.row_ptr(static_cast<int>(r));
                T* dst = da.row_ptr(ids[r]);
                for (int j = 0; j < g.cols(); ++j) dst[j] += src[j];
            }
        });
        return out;
    }

    Var slice_rows(Var a, int r0, int r1) {
        const Tensor& A = val(a);
        if (r0 < 0 || r1 > A.rows() || r0 >= r1)
            throw UsageError("slice_rows: bad range [" + std::to_string(r0) + ", " +
                             std::to_string(r1) + ") for " + A.shape_string());
        Tensor C({r1 - r0, A.cols()});
        std::copy_n(A.row_ptr(r0), static_cast<std::size_t>(r1 - r0) * A.cols(),
                    C.values().data());
        const Var out = push(std::move(C), needs(a));
        record(out, [this, a, r0](const Tensor& g) {
            Tensor& da = grad(a);
            for (int i = 0; i < g.rows(); ++i) {
                const T* src = g.row_ptr(i);
                T* dst = da.row_ptr(r0 + i);
                for (int j = 0; j < g.cols(); ++j) dst[j] += src[j];
            }
        });
        return out;
    }

    Var slice_cols(Var a, int c0, int c1) {
        const Tensor& A = val(a);
        if (c0 < 0 || c1 > A.cols() || c0 >= c1)
            throw UsageError("slice_cols: bad range [" + std::to_string(c0) + ", " +
                             std::to_string(c1) + ") for " + A.shape_string());
        Tensor C({A.rows(), c1 - c0});
        for (int i = 0; i < A.rows(); ++i)
            std::copy_n(A.row_ptr(i) + c0, c1 - c0, C.row_ptr(i));
        const Var out = push(std::move(C), needs(a));
        record(out, [this, a, c0](const Tensor& g) {
            Tensor& da = grad(a);
            for (int i = 0; i < g.rows(); ++i) {
                const T* src = g.row_ptr(i);
                T* dst = da.row_ptr(i) + c0;
                for (int j = 0; j < g.cols(); ++j) dst[j] += src[j];
            }
        });
        return out;
    }

    Var concat_rows(const std::vector<Var>& parts) {
        if (parts.empty()) throw UsageError("concat_rows: no parts");
        int rows = 0;
        const int cols = val(parts[0]).cols();
        for (Var p : parts) {
            require(val(p).cols() == cols, "concat_rows", val(parts[0]), val(p));
            rows += val(p).rows();
        }
        Tensor C({rows, cols});
        int r = 0;
        bool any = false;
        for (Var p : parts) {
            const Tensor& P = val(p);
            std::copy_n(P.values().data(), P.size(), C.row_ptr(r));
            r += P.rows();
            any = any || needs(p);
        }
        const Var out = push(std::move(C), any);
        record(out, [this, parts](const Tensor& g) {
            int r = 0;
            for (Var p : parts) {
                const int pr = val(p).rows();
                if (needs(p)) {
                    Tensor& dp = grad(p);
                    for (int i = 0; i < pr; ++i) {
                        const T* src = g.row_ptr(r + i);
                        T* dst = dp.row_ptr(i);
                        for (int j = 0; j < g.cols(); ++j) dst[j] += src[j];
                    }
                }
                r += pr;
            }
        });
        return out;
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw UsageError("concat_cols: no parts");
        const int rows = val(parts[0]).rows();
        int cols = 0;
        for (Var p : parts) {
            require(val(p).rows() == rows, "concat_cols", val(parts[0]), val(p));
            cols += val(p).cols();
        }
        Tensor C({rows, cols});
        int c = 0;
        bool any = false;
        for (Var p : parts) {
            const Tensor& P = val(p);
            for (int i = 0; i < rows; ++i)
                std::copy_n(P.row_ptr(i), P.cols(), C.row_ptr(i) + c);
            c += P.cols();
            any = any || needs(p);
        }
        const Var out = push(std::move(C), any);
        record(out, [this, parts](const Tensor& g) {
            int c = 0;
            for (Var p : parts) {
                const int pc = val(p).cols();
                if (needs(p)) {
                    Tensor& dp = grad(p);
                    for (int i = 0; i < g.rows(); ++i) {
                        const T* src = g.row_ptr(i) + c;
                        T* dst = dp.row_ptr(i);
                        for (int j = 0; j < pc; ++j) dst[j] += src[j];
                    }
                }
                c += pc;
            }
        });
        return out;
    }

    Var sum(Var a) {
        const Tensor& A = val(a);
        T s = T(0);
        for (T v : A.values()) s += v;
        const Var out = push(Tensor::scalar(s), needs(a));
        record(out, [this, a](const Tensor& g) {
            Tensor& da = grad(a);
            const T gv = g.values()[0];
            for (T& v : da.values()) v += gv;
        });
        return out;
    }

    // -log softmax(x[row])[target]. `allowed` optionally restricts the
    // normalization to a subset of columns (ascending ids); target must then
    // be a member of the subset.
    Var cross_entropy(Var a, int row, int target, const std::vector<int>* allowed = nullptr) {
        const Tensor& A = val(a);
        if (row < 0 || row >= A.rows())
            throw UsageError("cross_entropy: row out of range");
        if (target < 0 || target >= A.cols())
            throw UsageError("cross_entropy: target " + std::to_string(target) +
                             " out of range for " + std::to_string(A.cols()) + " logits");
        const T* x = A.row_ptr(row);
        std::vector<int> cols_storage;
        if (allowed) {
            cols_storage = *allowed;
            if (std::find(cols_storage.begin(), cols_storage.end(), target) == cols_storage.end())
                throw UsageError("cross_entropy: target not in allowed subset");
        }
        T m;
        if (allowed) {
            m = x[cols_storage[0]];
            for (int c : cols_storage) m = std::max(m, x[c]);
        } else {
            m = x[0];
            for (int j = 1; j < A.cols(); ++j) m = std::max(m, x[j]);
        }
        T s = T(0);
        if (allowed) {
            for (int c : cols_storage) s += std::exp(x[c] - m);
        } else {
            for (int j = 0; j < A.cols(); ++j) s += std::exp(x[j] - m);
        }
        const T loss = m + std::log(s) - x[target];
        const Var out = push(Tensor::scalar(loss), needs(a));
        record(out, [this, a, row, target, m, s,
                     cols = std::move(cols_storage)](const Tensor& g) {
            Tensor& da = grad(a);
            const Tensor& A = val(a);
            const T* x = A.row_ptr(row);
            T* d = da.row_ptr(row);
            const T gv = g.values()[0];
            const T inv = T(1) / s;
            if (!cols.empty()) {
                for (int c : cols) d[c] += gv * std::exp(x[c] - m) * inv;
            } else {
                for (int j = 0; j < A.cols(); ++j) d[j] += gv * std::exp(x[j] - m) * inv;
            }
            d[target] -= gv;
        });
        return out;
    }

    // ---- driver ------------------------------------------------------

    const Tensor& value(Var v) const { return val(v); }

    // Gradient of the last backward() with respect to node v. Zero tensor if
    // the node did not require gradients.
    const Tensor& gradient(Var v) {
        Node& n = node(v);
        if (n.grad.empty()) n.grad = Tensor(val(v).shape());
        return n.grad;
    }

    void backward(Var loss) {
        Node& ln = node(loss);
        if (val(loss).size() != 1) throw UsageError("backward: loss must be scalar");
        for (Node& n : nodes_) {
            if (n.needs_grad) {
                if (n.grad.empty()) n.grad = Tensor(value_of(n).shape());
                else n.grad.fill(T(0));
            }
        }
        if (!ln.needs_grad) return;  // loss does not depend on any gradient path
        ln.grad.values()[0] = T(1);
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (i > loss.id || !n.needs_grad || !n.backward) continue;
            n.backward(n.grad);
        }
        for (Node& n : nodes_) {
            if (n.param) axpy(T(1), n.grad, n.param->grad);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor owned;            // storage unless this is a parameter leaf
        Parameter* param = nullptr;
        Tensor grad;
        bool needs_grad = false;
        std::function<void(const Tensor&)> backward;
    };

    Tensor& value_of(Node& n) { return n.param ? n.param->value : n.owned; }
    const Tensor& value_of(const Node& n) const { return n.param ? n.param->value : n.owned; }

    Node& node(Var v) {
        if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
            throw UsageError("invalid tape node handle");
        return nodes_[static_cast<std::size_t>(v.id)];
    }
    const Node& node(Var v) const {
        if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
            throw UsageError("invalid tape node handle");
        return nodes_[static_cast<std::size_t>(v.id)];
    }

    const Tensor& val(Var v) const { return value_of(node(v)); }
    Tensor& grad(Var v) { return node(v).grad; }
    bool needs(Var v) const { return node(v).needs_grad; }

    Var push(Tensor t, bool needs_grad) {
        Node n;
        n.owned = std::move(t);
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Var push_ref(Tensor& /*external*/, bool needs_grad) {
        Node n;
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void record(Var v, std::function<void(const Tensor&)> fn) {
        node(v).backward = std::move(fn);
    }

    static void axpy(T c, const Tensor& x, Tensor& y) {
        if (y.empty()) y = Tensor(x.shape());
        const T* px = x.values().data();
        T* py = y.values().data();
        for (std::size_t i = 0; i < x.size(); ++i) py[i] += c * px[i];
    }

    // C += op(A) * op(B), where ta/tb transpose their operand. Plain ikj
    // loops; fast enough single-threaded at lab scale and fully
    // deterministic.
    static void matmul_acc(const Tensor& A, const Tensor& B, Tensor& C, bool ta, bool tb) {
        const int m = ta ? A.cols() : A.rows();
        const int k = ta ? A.rows() : A.cols();
        const int nn = tb ? B.rows() : B.cols();
        if (C.empty()) C = Tensor({m, nn});
        if (!ta && !tb) {
            for (int i = 0; i < m; ++i) {
                T* c = C.row_ptr(i);
                const T* a = A.row_ptr(i);
                for (int p = 0; p < k; ++p) {
                    const T av = a[p];
                    const T* b = B.row_ptr(p);
                    for (int j = 0; j < nn; ++j) c[j] += av * b[j];
                }
            }
        } else if (!ta && tb) {
            // C[i,j] += sum_p A[i,p] * B[j,p]
            for (int i = 0; i < m; ++i) {
                T* c = C.row_ptr(i);
                const T* a = A.row_ptr(i);
                for (int j = 0; j < nn; ++j) {
                    const T* b = B.row_ptr(j);
                    T s = T(0);
                    for (int p = 0; p < k; ++p) s += a[p] * b[p];
                    c[j] += s;
                }
            }
        } else if (ta && !tb) {
            // C[i,j] += sum_p A[p,i] * B[p,j]
            for (int p = 0; p < k; ++p) {
                const T* a = A.row_ptr(p);
                const T* b = B.row_ptr(p);
                for (int i = 0; i < m; ++i) {
                    const T av = a[i];
                    T* c = C.row_ptr(i);
                    for (int j = 0; j < nn; ++j) c[j] += av * b[j];
                }
            }
        } else {
            for (int i = 0; i < m; ++i) {
                T* c = C.row_ptr(i);
                for (int j = 0; j < nn; ++j) {
                    T s = T(0);
                    for (int p = 0; p < k; ++p) s += A.at(p, i) * B.at(j, p);
                    c[j] += s;
                }
            }
        }
    }

    static T gelu_fwd(T x) {
        return x * T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
    }
    static T gelu_grad(T x) {
        const T phi = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
        const T pdf = std::exp(T(-0.5) * x * x) * T(0.39894228040143267794);
        return phi + x * pdf;
    }

    void require(bool ok, const char* op, const TensorT<T>& a) const {
        if (!ok) throw ShapeError(std::string(op) + ": bad shape " + a.shape_string());
    }
    void require(bool ok, const char* op, const TensorT<T>& a, const TensorT<T>& b) const {
        if (!ok)
            throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_string() +
                             " and " + b.shape_string());
    }

    std::vector<Node> nodes_;
};

using Tape = TapeT<double>;
using TapeF = TapeT<float>;

}  // namespace gadlab::num
