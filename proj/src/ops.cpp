#include "divctl/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "divctl/errors.hpp"

namespace divctl {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

CMatMap cmat(const Buffer& v, std::size_t r, std::size_t c) {
    return CMatMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MatMap mat(Buffer& v, std::size_t r, std::size_t c) {
    return MatMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
}

void require_matrix(const Tensor& a, const char* op) {
    require(a.ndim() == 2, std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

// Rows/cols for ops that treat a 1-D tensor as a single row.
std::pair<std::size_t, std::size_t> as_rows(const Tensor& x) {
    if (x.ndim() == 1) {
        return {1, x.dim(0)};
    }
    require_matrix(x, "row op");
    return {x.rows(), x.cols()};
}

bool wants(const detail::Node& n, std::size_t i) {
    return n.inputs[i]->requires_grad;
}

template <typename F>
Tensor unary_map(const Tensor& x, F&& fwd, Buffer (*deriv)(const Buffer&,
                                                                       const Buffer&)) {
    Buffer out(x.numel());
    auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = fwd(in[i]);
    }
    return make_result(x.shape(), std::move(out), {x}, [deriv](detail::Node& n) {
        auto& src = *n.inputs[0];
        const Buffer d = deriv(src.value, n.value);
        for (std::size_t i = 0; i < d.size(); ++i) {
            src.grad[i] += n.grad[i] * d[i];
        }
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Buffer out(a.numel());
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x[i] + y[i];
    }
    return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (wants(n, k)) {
                auto& g = n.inputs[k]->grad;
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += n.grad[i];
                }
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Buffer out(a.numel());
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x[i] - y[i];
    }
    return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
        if (wants(n, 0)) {
            auto& g = n.inputs[0]->grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += n.grad[i];
            }
        }
        if (wants(n, 1)) {
            auto& g = n.inputs[1]->grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] -= n.grad[i];
            }
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Buffer out(a.numel());
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x[i] * y[i];
    }
    return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
        auto& xa = n.inputs[0]->value;
        auto& xb = n.inputs[1]->value;
        if (wants(n, 0)) {
            auto& g = n.inputs[0]->grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += n.grad[i] * xb[i];
            }
        }
        if (wants(n, 1)) {
            auto& g = n.inputs[1]->grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += n.grad[i] * xa[i];
            }
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    Buffer out(a.data().begin(), a.data().end());
    for (double& v : out) {
        v *= s;
    }
    return make_result(a.shape(), std::move(out), {a}, [s](detail::Node& n) {
        auto& g = n.inputs[0]->grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += n.grad[i] * s;
        }
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.rows();
    const std::size_t k = a.cols();
    const std::size_t nn = b.cols();
    require(b.rows() == k, "matmul: inner dimension mismatch " + shape_str(a.shape()) + " * " +
                               shape_str(b.shape()));
    Buffer out(m * nn);
    mat(out, m, nn).noalias() = cmat(a.node()->value, m, k) * cmat(b.node()->value, k, nn);
    return make_result({m, nn}, std::move(out), {a, b}, [m, k, nn](detail::Node& n) {
        auto dy = cmat(n.grad, m, nn);
        if (wants(n, 0)) {
            mat(n.inputs[0]->grad, m, k).noalias() += dy * cmat(n.inputs[1]->value, k, nn).transpose();
        }
        if (wants(n, 1)) {
            mat(n.inputs[1]->grad, k, nn).noalias() += cmat(n.inputs[0]->value, m, k).transpose() * dy;
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w) {
    require_matrix(x, "linear");
    require_matrix(w, "linear");
    const std::size_t rows = x.rows();
    const std::size_t in = x.cols();
    const std::size_t out_dim = w.rows();
    require(w.cols() == in, "linear: weight " + shape_str(w.shape()) + " does not accept input " +
                                shape_str(x.shape()));
    Buffer out(rows * out_dim);
    mat(out, rows, out_dim).noalias() =
        cmat(x.node()->value, rows, in) * cmat(w.node()->value, out_dim, in).transpose();
    return make_result({rows, out_dim}, std::move(out), {x, w}, [rows, in, out_dim](detail::Node& n) {
        auto dy = cmat(n.grad, rows, out_dim);
        if (wants(n, 0)) {
            mat(n.inputs[0]->grad, rows, in).noalias() += dy * cmat(n.inputs[1]->value, out_dim, in);
        }
        if (wants(n, 1)) {
            mat(n.inputs[1]->grad, out_dim, in).noalias() +=
                dy.transpose() * cmat(n.inputs[0]->value, rows, in);
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_row(linear(x, w), b);
}

Tensor add_row(const Tensor& x, const Tensor& b) {
    auto [rows, cols] = as_rows(x);
    require(b.numel() == cols, "add_row: bias length " + std::to_string(b.numel()) +
                                   " does not match width " + std::to_string(cols));
    Buffer out(x.data().begin(), x.data().end());
    auto bv = b.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] += bv[c];
        }
    }
    return make_result(x.shape(), std::move(out), {x, b}, [rows, cols](detail::Node& n) {
        if (wants(n, 0)) {
            auto& g = n.inputs[0]->grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += n.grad[i];
            }
        }
        if (wants(n, 1)) {
            auto& g = n.inputs[1]->grad;
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    g[c] += n.grad[r * cols + c];
                }
            }
        }
    });
}

Tensor repeat_rows(const Tensor& x, std::size_t times) {
    require_matrix(x, "repeat_rows");
    const std::size_t rows = x.rows();
    const std::size_t cols = x.cols();
    Buffer out(rows * times * cols);
    auto in = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t t = 0; t < times; ++t) {
            std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(r * cols), cols,
                        out.begin() + static_cast<std::ptrdiff_t>((r * times + t) * cols));
        }
    }
    return make_result({rows * times, cols}, std::move(out), {x}, [rows, cols, times](detail::Node& n) {
        auto& g = n.inputs[0]->grad;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t t = 0; t < times; ++t) {
                for (std::size_t c = 0; c < cols; ++c) {
                    g[r * cols + c] += n.grad[(r * times + t) * cols + c];
                }
            }
        }
    });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    require(!parts.empty(), "concat_rows: no inputs");
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        require(p.cols() == cols, "concat_rows: width mismatch");
        rows += p.rows();
    }
    Buffer out;
    out.reserve(rows * cols);
    std::vector<std::size_t> sizes;
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        sizes.push_back(p.numel());
    }
    return make_result({rows, cols}, std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                       [sizes](detail::Node& n) {
                           std::size_t off = 0;
                           for (std::size_t k = 0; k < sizes.size(); ++k) {
                               if (wants(n, k)) {
                                   auto& g = n.inputs[k]->grad;
                                   for (std::size_t i = 0; i < sizes[k]; ++i) {
                                       g[i] += n.grad[off + i];
                                   }
                               }
                               off += sizes[k];
                           }
                       });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    require_matrix(x, "slice_rows");
    require(begin <= end && end <= x.rows(), "slice_rows: range out of bounds");
    const std::size_t cols = x.cols();
    auto in = x.data();
    Buffer out(in.begin() + static_cast<std::ptrdiff_t>(begin * cols),
                            in.begin() + static_cast<std::ptrdiff_t>(end * cols));
    return make_result({end - begin, cols}, std::move(out), {x}, [begin, cols](detail::Node& n) {
        auto& g = n.inputs[0]->grad;
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            g[begin * cols + i] += n.grad[i];
        }
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    require(shape_numel(shape) == x.numel(),
            "reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    Buffer out(x.data().begin(), x.data().end());
    return make_result(std::move(shape), std::move(out), {x}, [](detail::Node& n) {
        auto& g = n.inputs[0]->grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += n.grad[i];
        }
    });
}

Tensor layer_norm(const Tensor& x, double eps) {
    auto [rows, cols] = as_rows(x);
    Buffer out(x.numel());
    Buffer rstd(rows);
    auto in = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in.data() + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            mu += row[c];
        }
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            var += (row[c] - mu) * (row[c] - mu);
        }
        var /= static_cast<double>(cols);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = (row[c] - mu) * rstd[r];
        }
    }
    return make_result(x.shape(), std::move(out), {x},
                       [rows, cols, rstd = std::move(rstd)](detail::Node& n) {
                           auto& g = n.inputs[0]->grad;
                           const double inv = 1.0 / static_cast<double>(cols);
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* dy = n.grad.data() + r * cols;
                               const double* y = n.value.data() + r * cols;
                               double mdy = 0.0;
                               double mdyy = 0.0;
                               for (std::size_t c = 0; c < cols; ++c) {
                                   mdy += dy[c];
                                   mdyy += dy[c] * y[c];
                               }
                               mdy *= inv;
                               mdyy *= inv;
                               for (std::size_t c = 0; c < cols; ++c) {
                                   g[r * cols + c] += rstd[r] * (dy[c] - mdy - y[c] * mdyy);
                               }
                           }
                       });
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

double gelu_value(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

Buffer gelu_deriv(const Buffer& x, const Buffer&) {
    Buffer d(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double u = kGeluC * (x[i] + 0.044715 * x[i] * x[i] * x[i]);
        const double th = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x[i] * x[i]);
        d[i] = 0.5 * (1.0 + th) + 0.5 * x[i] * (1.0 - th * th) * du;
    }
    return d;
}

double silu_value(double x) {
    return x / (1.0 + std::exp(-x));
}

Buffer silu_deriv(const Buffer& x, const Buffer&) {
    Buffer d(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-x[i]));
        d[i] = s * (1.0 + x[i] * (1.0 - s));
    }
    return d;
}

Buffer tanh_deriv(const Buffer&, const Buffer& y) {
    Buffer d(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        d[i] = 1.0 - y[i] * y[i];
    }
    return d;
}

}  // namespace

Tensor gelu(const Tensor& x) {
    return unary_map(x, gelu_value, gelu_deriv);
}

Tensor silu(const Tensor& x) {
    return unary_map(x, silu_value, silu_deriv);
}

Tensor tanh(const Tensor& x) {
    return unary_map(x, [](double v) { return std::tanh(v); }, tanh_deriv);
}

Tensor softmax(const Tensor& x) {
    auto [rows, cols] = as_rows(x);
    require(cols >= 1, "softmax: empty input");
    auto in = x.data();
    Buffer out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in.data() + r * cols;
        double mx = row[0];
        for (std::size_t c = 0; c < cols; ++c) {
            if (!std::isfinite(row[c])) {
                throw InvalidInput("softmax: non-finite logit at index " + std::to_string(c));
            }
            mx = std::max(mx, row[c]);
        }
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = std::exp(row[c] - mx);
            z += out[r * cols + c];
        }
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] /= z;
        }
    }
    return make_result(x.shape(), std::move(out), {x}, [rows, cols](detail::Node& n) {
        auto& g = n.inputs[0]->grad;
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = n.value.data() + r * cols;
            const double* dy = n.grad.data() + r * cols;
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                s += dy[c] * y[c];
            }
            for (std::size_t c = 0; c < cols; ++c) {
                g[r * cols + c] += y[c] * (dy[c] - s);
            }
        }
    });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq_len,
                 std::size_t heads) {
    require_same_shape(q, k, "attention");
    require_same_shape(q, v, "attention");
    require_matrix(q, "attention");
    const std::size_t rows = q.rows();
    const std::size_t width = q.cols();
    require(seq_len > 0 && rows % seq_len == 0, "attention: rows not a multiple of seq_len");
    require(heads > 0 && width % heads == 0, "attention: width not divisible by heads");
    const std::size_t items = rows / seq_len;
    const std::size_t hd = width / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto S = static_cast<Eigen::Index>(seq_len);
    const auto H = static_cast<Eigen::Index>(hd);
    const auto W = static_cast<Eigen::Index>(width);
    using Strided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
    using MStrided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

    Buffer out(rows * width, 0.0);
    Buffer probs(items * heads * seq_len * seq_len);
    const double* qp = q.data().data();
    const double* kp = k.data().data();
    const double* vp = v.data().data();
    for (std::size_t it = 0; it < items; ++it) {
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = it * seq_len * width + h * hd;
            Strided qm(qp + off, S, H, Eigen::OuterStride<>(W));
            Strided km(kp + off, S, H, Eigen::OuterStride<>(W));
            Strided vm(vp + off, S, H, Eigen::OuterStride<>(W));
            MatMap p(probs.data() + (it * heads + h) * seq_len * seq_len, S, S);
            p.noalias() = (qm * km.transpose()) * inv_sqrt;
            for (Eigen::Index r = 0; r < S; ++r) {
                const double mx = p.row(r).maxCoeff();
                p.row(r) = (p.row(r).array() - mx).exp();
                p.row(r) /= p.row(r).sum();
            }
            MStrided om(out.data() + off, S, H, Eigen::OuterStride<>(W));
            om.noalias() = p * vm;
        }
    }
    return make_result(
        q.shape(), std::move(out), {q, k, v},
        [items, heads, seq_len, width, hd, inv_sqrt, S, H, W, probs = std::move(probs)](detail::Node& n) {
            const double* qp = n.inputs[0]->value.data();
            const double* kp = n.inputs[1]->value.data();
            const double* vp = n.inputs[2]->value.data();
            RowMat dp(S, S);
            for (std::size_t it = 0; it < items; ++it) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t off = it * seq_len * width + h * hd;
                    Strided qm(qp + off, S, H, Eigen::OuterStride<>(W));
                    Strided km(kp + off, S, H, Eigen::OuterStride<>(W));
                    Strided vm(vp + off, S, H, Eigen::OuterStride<>(W));
                    Strided dom(n.grad.data() + off, S, H, Eigen::OuterStride<>(W));
                    CMatMap p(probs.data() + (it * heads + h) * seq_len * seq_len, S, S);
                    if (wants(n, 2)) {
                        MStrided dv(n.inputs[2]->grad.data() + off, S, H, Eigen::OuterStride<>(W));
                        dv.noalias() += p.transpose() * dom;
                    }
                    dp.noalias() = dom * vm.transpose();
                    for (Eigen::Index r = 0; r < S; ++r) {
                        const double s = dp.row(r).dot(p.row(r));
                        dp.row(r) = (p.row(r).array() * (dp.row(r).array() - s)).matrix();
                    }
                    dp *= inv_sqrt;
                    if (wants(n, 0)) {
                        MStrided dq(n.inputs[0]->grad.data() + off, S, H, Eigen::OuterStride<>(W));
                        dq.noalias() += dp * km;
                    }
                    if (wants(n, 1)) {
                        MStrided dk(n.inputs[1]->grad.data() + off, S, H, Eigen::OuterStride<>(W));
                        dk.noalias() += dp.transpose() * qm;
                    }
                }
            }
        });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) {
        s += v;
    }
    return make_result({1}, {s}, {x}, [](detail::Node& n) {
        auto& g = n.inputs[0]->grad;
        for (double& gi : g) {
            gi += n.grad[0];
        }
    });
}

Tensor mean(const Tensor& x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor dot(const Tensor& a, const Tensor& b) {
    require(a.numel() == b.numel(), "dot: length mismatch");
    double s = 0.0;
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        s += x[i] * y[i];
    }
    return make_result({1}, {s}, {a, b}, [](detail::Node& n) {
        const double g = n.grad[0];
        if (wants(n, 0)) {
            auto& ga = n.inputs[0]->grad;
            for (std::size_t i = 0; i < ga.size(); ++i) {
                ga[i] += g * n.inputs[1]->value[i];
            }
        }
        if (wants(n, 1)) {
            auto& gb = n.inputs[1]->grad;
            for (std::size_t i = 0; i < gb.size(); ++i) {
                gb[i] += g * n.inputs[0]->value[i];
            }
        }
    });
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse_loss");
    auto x = a.data();
    auto y = b.data();
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - y[i];
        s += d * d;
    }
    const double inv = 1.0 / static_cast<double>(x.size());
    return make_result({1}, {s * inv}, {a, b}, [inv](detail::Node& n) {
        const double g = 2.0 * inv * n.grad[0];
        auto& xa = n.inputs[0]->value;
        auto& xb = n.inputs[1]->value;
        if (wants(n, 0)) {
            auto& ga = n.inputs[0]->grad;
            for (std::size_t i = 0; i < ga.size(); ++i) {
                ga[i] += g * (xa[i] - xb[i]);
            }
        }
        if (wants(n, 1)) {
            auto& gb = n.inputs[1]->grad;
            for (std::size_t i = 0; i < gb.size(); ++i) {
                gb[i] -= g * (xa[i] - xb[i]);
            }
        }
    });
}

Tensor row_cosine(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "row_cosine");
    auto [rows, cols] = as_rows(a);
    auto x = a.data();
    auto y = b.data();
    Buffer out(rows, 0.0);
    Buffer na(rows), nb(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double d = 0.0, sa = 0.0, sb = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            d += x[r * cols + c] * y[r * cols + c];
            sa += x[r * cols + c] * x[r * cols + c];
            sb += y[r * cols + c] * y[r * cols + c];
        }
        na[r] = std::sqrt(sa);
        nb[r] = std::sqrt(sb);
        if (na[r] > 0.0 && nb[r] > 0.0) {
            out[r] = std::clamp(d / (na[r] * nb[r]), -1.0, 1.0);
        }
    }
    return make_result({rows}, std::move(out), {a, b},
                       [rows, cols, na = std::move(na), nb = std::move(nb)](detail::Node& n) {
                           auto& xa = n.inputs[0]->value;
                           auto& xb = n.inputs[1]->value;
                           for (std::size_t r = 0; r < rows; ++r) {
                               if (na[r] == 0.0 || nb[r] == 0.0) {
                                   continue;
                               }
                               const double g = n.grad[r];
                               const double cs = n.value[r];
                               const double inv = 1.0 / (na[r] * nb[r]);
                               for (std::size_t c = 0; c < cols; ++c) {
                                   const std::size_t i = r * cols + c;
                                   if (wants(n, 0)) {
                                       n.inputs[0]->grad[i] +=
                                           g * (xb[i] * inv - cs * xa[i] / (na[r] * na[r]));
                                   }
                                   if (wants(n, 1)) {
                                       n.inputs[1]->grad[i] +=
                                           g * (xa[i] * inv - cs * xb[i] / (nb[r] * nb[r]));
                                   }
                               }
                           }
                       });
}

namespace {

Tensor scaled_outer_impl(const Tensor& u, const Tensor& s, const Tensor& v, const Tensor* c) {
    require_matrix(u, "scaled_outer");
    require_matrix(v, "scaled_outer");
    const std::size_t o = u.rows();
    const std::size_t r = u.cols();
    const std::size_t i = v.rows();
    require(v.cols() == r && s.numel() == r,
            "scaled_outer: factor shapes " + shape_str(u.shape()) + ", " + shape_str(s.shape()) +
                ", " + shape_str(v.shape()) + " disagree");
    require(c == nullptr || c->numel() == r, "scaled_outer: coefficient length mismatch");

    Buffer w(r);
    std::vector<Eigen::Index> live;
    for (std::size_t j = 0; j < r; ++j) {
        w[j] = s[j] * (c ? (*c)[j] : 1.0);
        if (w[j] != 0.0) {
            live.push_back(static_cast<Eigen::Index>(j));
        }
    }
    Buffer out(o * i, 0.0);
    if (!live.empty()) {
        auto um = cmat(u.node()->value, o, r);
        auto vm = cmat(v.node()->value, i, r);
        const auto nl = static_cast<Eigen::Index>(live.size());
        RowMat uw(static_cast<Eigen::Index>(o), nl);
        RowMat vl(static_cast<Eigen::Index>(i), nl);
        for (Eigen::Index j = 0; j < nl; ++j) {
            uw.col(j) = um.col(live[j]) * w[live[j]];
            vl.col(j) = vm.col(live[j]);
        }
        mat(out, o, i).noalias() = uw * vl.transpose();
    }

    std::vector<Tensor> inputs{u, s, v};
    if (c) {
        inputs.push_back(*c);
    }
    const bool has_c = c != nullptr;
    return make_result(
        {o, i}, std::move(out), inputs,
        [o, r, i, has_c, w = std::move(w), live = std::move(live)](detail::Node& n) {
            auto g = cmat(n.grad, o, i);
            auto um = cmat(n.inputs[0]->value, o, r);
            auto vm = cmat(n.inputs[2]->value, i, r);
            // dW/dw_j = u_j v_j^T, so dw_j = u_j^T G v_j.
            const bool need_w = wants(n, 1) || (has_c && wants(n, 3));
            if (need_w) {
                const RowMat gv = g * vm;  // o x r
                for (std::size_t j = 0; j < r; ++j) {
                    const double dw = um.col(static_cast<Eigen::Index>(j)).dot(gv.col(static_cast<Eigen::Index>(j)));
                    const double cj = has_c ? n.inputs[3]->value[j] : 1.0;
                    if (wants(n, 1)) {
                        n.inputs[1]->grad[j] += dw * cj;
                    }
                    if (has_c && wants(n, 3)) {
                        n.inputs[3]->grad[j] += dw * n.inputs[1]->value[j];
                    }
                }
            }
            if (live.empty()) {
                return;
            }
            const auto nl = static_cast<Eigen::Index>(live.size());
            if (wants(n, 0)) {
                RowMat vw(static_cast<Eigen::Index>(i), nl);
                for (Eigen::Index j = 0; j < nl; ++j) {
                    vw.col(j) = vm.col(live[j]) * w[live[j]];
                }
                const RowMat du = g * vw;
                auto gu = mat(n.inputs[0]->grad, o, r);
                for (Eigen::Index j = 0; j < nl; ++j) {
                    gu.col(live[j]) += du.col(j);
                }
            }
            if (wants(n, 2)) {
                RowMat uw(static_cast<Eigen::Index>(o), nl);
                for (Eigen::Index j = 0; j < nl; ++j) {
                    uw.col(j) = um.col(live[j]) * w[live[j]];
                }
                const RowMat dv = g.transpose() * uw;
                auto gv = mat(n.inputs[2]->grad, i, r);
                for (Eigen::Index j = 0; j < nl; ++j) {
                    gv.col(live[j]) += dv.col(j);
                }
            }
        });
}

}  // namespace

Tensor scaled_outer(const Tensor& u, const Tensor& s, const Tensor& v) {
    return scaled_outer_impl(u, s, v, nullptr);
}

Tensor scaled_outer(const Tensor& u, const Tensor& s, const Tensor& v, const Tensor& c) {
    return scaled_outer_impl(u, s, v, &c);
}

}  // namespace divctl

namespace divctl {

CosineResult cosine_similarity(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "cosine_similarity: length mismatch");
    double d = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d += a[i] * b[i];
        sa += a[i] * a[i];
        sb += b[i] * b[i];
    }
    if (sa == 0.0 || sb == 0.0) {
        return {0.0, sa == 0.0 && sb == 0.0};
    }
    return {std::clamp(d / (std::sqrt(sa) * std::sqrt(sb)), -1.0, 1.0), false};
}

}  // namespace divctl
