#pragma once

// Dense real-valued tensors (rank 0..2, row-major) and the elementwise /
// linear-algebra kernels everything else is built from. 64-bit floats only;
// the gradient cross-checks in the test suite need the precision headroom.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pcdde {

class Tensor {
public:
    Tensor() = default;

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_.size() > 2)
            throw std::invalid_argument("Tensor: rank > 2 not supported");
        if (element_count(shape_) != data_.size())
            throw std::invalid_argument("Tensor: shape " + shape_string(shape_) +
                                        " does not match data length " + std::to_string(data_.size()));
    }

    static Tensor zeros(std::vector<std::size_t> shape) {
        std::size_t n = element_count(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }

    static Tensor vector(std::vector<double> v) {
        std::size_t n = v.size();
        return Tensor({n}, std::move(v));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Tensor({rows, cols}, std::move(v));
    }

    static Tensor full_like(const Tensor& t, double v) {
        return Tensor(t.shape(), std::vector<double>(t.size(), v));
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // Row count of a matrix, length of a vector, 1 for a scalar.
    std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
    std::size_t cols() const { return shape_.size() == 2 ? shape_[1] : 1; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

    static std::string shape_string(const std::vector<std::size_t>& shape) {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << ']';
        return os.str();
    }
    std::string shape_string() const { return shape_string(shape_); }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Kernels. All pure; shape checks throw std::invalid_argument naming the op.
// ---------------------------------------------------------------------------

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_string() +
                                    " vs " + b.shape_string());
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

inline void add_in_place(Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

// Broadcast add of a column vector onto every column; plain add for vectors.
inline void add_bias_columns(Tensor& m, const Tensor& b) {
    if (m.rank() == 1) {
        add_in_place(m, b);
        return;
    }
    if (m.rows() != b.rows())
        throw std::invalid_argument("bias length " + b.shape_string() + " does not match rows of " +
                                    m.shape_string());
    std::size_t cols = m.cols();
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double bi = b[i];
        double* row = m.data() + i * cols;
        for (std::size_t j = 0; j < cols; ++j) row[j] += bi;
    }
}

// Row-sum over columns; the bias gradient for a column-batched pass.
inline Tensor row_sums(const Tensor& m) {
    if (m.rank() == 1) return m;
    Tensor out = Tensor::zeros({m.rows()});
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const double* row = m.data() + i * m.cols();
        double acc = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) acc += row[j];
        out[i] = acc;
    }
    return out;
}

// a += c * b
inline void axpy_in_place(Tensor& a, double c, const Tensor& b) {
    check_same_shape("axpy", a, b);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += c * b[i];
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
    return out;
}

inline Tensor tanh(const Tensor& a) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
    return out;
}

inline Tensor relu(const Tensor& a) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    return out;
}

// A [m x n] times B, where B is a vector [n] or a matrix [n x p].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2)
        throw std::invalid_argument("matmul: left operand must be a matrix, got " + a.shape_string());
    std::size_t m = a.shape()[0], n = a.shape()[1];
    if (b.rank() == 1) {
        if (b.shape()[0] != n)
            throw std::invalid_argument("matmul: shape mismatch " + a.shape_string() + " vs " + b.shape_string());
        Tensor out = Tensor::zeros({m});
        for (std::size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            const double* row = a.data() + i * n;
            for (std::size_t k = 0; k < n; ++k) acc += row[k] * b[k];
            out[i] = acc;
        }
        return out;
    }
    if (b.rank() == 2) {
        if (b.shape()[0] != n)
            throw std::invalid_argument("matmul: shape mismatch " + a.shape_string() + " vs " + b.shape_string());
        std::size_t p = b.shape()[1];
        Tensor out = Tensor::zeros({m, p});
        for (std::size_t i = 0; i < m; ++i) {
            double* orow = out.data() + i * p;
            const double* arow = a.data() + i * n;
            for (std::size_t k = 0; k < n; ++k) {
                double aik = arow[k];
                const double* brow = b.data() + k * p;
                for (std::size_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
            }
        }
        return out;
    }
    throw std::invalid_argument("matmul: right operand must be vector or matrix, got " + b.shape_string());
}

// A^T times v (or A^T times M), without materializing the transpose.
inline Tensor matmul_transposed_left(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2)
        throw std::invalid_argument("matmul_transposed_left: left operand must be a matrix");
    std::size_t m = a.shape()[0], n = a.shape()[1];
    if (b.rank() == 1) {
        if (b.shape()[0] != m)
            throw std::invalid_argument("matmul_transposed_left: shape mismatch");
        Tensor out = Tensor::zeros({n});
        for (std::size_t i = 0; i < m; ++i) {
            const double* row = a.data() + i * n;
            double bi = b[i];
            for (std::size_t k = 0; k < n; ++k) out[k] += row[k] * bi;
        }
        return out;
    }
    if (b.rank() == 2) {
        if (b.shape()[0] != m)
            throw std::invalid_argument("matmul_transposed_left: shape mismatch");
        std::size_t p = b.shape()[1];
        Tensor out = Tensor::zeros({n, p});
        for (std::size_t i = 0; i < m; ++i) {
            const double* arow = a.data() + i * n;
            const double* brow = b.data() + i * p;
            for (std::size_t k = 0; k < n; ++k) {
                double aik = arow[k];
                double* orow = out.data() + k * p;
                for (std::size_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
            }
        }
        return out;
    }
    throw std::invalid_argument("matmul_transposed_left: bad right operand");
}

// cot * b^T where cot is [m] or [m x p] and b is [n] or [n x p]; result [m x n].
// This is the matmul VJP with respect to the left (matrix) operand.
inline Tensor outer_grad(const Tensor& cot, const Tensor& b, std::size_t m, std::size_t n) {
    Tensor out = Tensor::zeros({m, n});
    if (cot.rank() <= 1 && b.rank() == 1) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t k = 0; k < n; ++k) out.at(i, k) = cot[i] * b[k];
        return out;
    }
    if (cot.rank() == 2 && b.rank() == 2) {
        std::size_t p = cot.shape()[1];
        for (std::size_t i = 0; i < m; ++i) {
            const double* crow = cot.data() + i * p;
            for (std::size_t k = 0; k < n; ++k) {
                const double* brow = b.data() + k * p;
                double acc = 0.0;
                for (std::size_t j = 0; j < p; ++j) acc += crow[j] * brow[j];
                out.at(i, k) = acc;
            }
        }
        return out;
    }
    throw std::invalid_argument("outer_grad: operand ranks must match");
}

// Concatenation along the leading axis: vectors chain end to end, matrices
// stack rows (all operands must share the column count).
inline Tensor concat(std::span<const Tensor> parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no operands");
    std::size_t rank = parts[0].rank();
    if (rank == 1) {
        std::vector<double> out;
        for (const Tensor& p : parts) {
            if (p.rank() != 1)
                throw std::invalid_argument("concat: mixed ranks " + parts[0].shape_string() + " vs " + p.shape_string());
            out.insert(out.end(), p.values().begin(), p.values().end());
        }
        return Tensor::vector(std::move(out));
    }
    if (rank == 2) {
        std::size_t cols = parts[0].cols(), rows = 0;
        for (const Tensor& p : parts) {
            if (p.rank() != 2 || p.cols() != cols)
                throw std::invalid_argument("concat: shape mismatch " + parts[0].shape_string() + " vs " + p.shape_string());
            rows += p.rows();
        }
        Tensor out = Tensor::zeros({rows, cols});
        std::size_t r = 0;
        for (const Tensor& p : parts) {
            std::copy(p.values().begin(), p.values().end(), out.data() + r * cols);
            r += p.rows();
        }
        return out;
    }
    throw std::invalid_argument("concat: scalar operands not supported");
}

inline Tensor concat(std::initializer_list<Tensor> parts) {
    std::vector<Tensor> v(parts);
    return concat(std::span<const Tensor>(v));
}

// Leading-axis slice [begin, end): subrange of a vector, row block of a matrix.
inline Tensor slice(const Tensor& a, std::size_t begin, std::size_t end) {
    if (begin > end || end > a.rows())
        throw std::invalid_argument("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                                    ") out of bounds for " + a.shape_string());
    std::size_t cols = a.cols();
    if (a.rank() == 1) {
        std::vector<double> out(a.data() + begin, a.data() + end);
        return Tensor::vector(std::move(out));
    }
    if (a.rank() == 2) {
        std::vector<double> out(a.data() + begin * cols, a.data() + end * cols);
        return Tensor::matrix(end - begin, cols, std::move(out));
    }
    throw std::invalid_argument("slice: scalar operand not supported");
}

inline double dot(const Tensor& a, const Tensor& b) {
    check_same_shape("dot", a, b);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

// Column subset of a matrix, in the order given. Used for minibatching.
inline Tensor gather_columns(const Tensor& a, std::span<const std::size_t> idx) {
    if (a.rank() != 2) throw std::invalid_argument("gather_columns: need a matrix, got " + a.shape_string());
    Tensor out = Tensor::zeros({a.rows(), idx.size()});
    for (std::size_t c = 0; c < idx.size(); ++c) {
        if (idx[c] >= a.cols())
            throw std::invalid_argument("gather_columns: column " + std::to_string(idx[c]) +
                                        " out of bounds for " + a.shape_string());
        for (std::size_t r = 0; r < a.rows(); ++r) out.at(r, c) = a.at(r, idx[c]);
    }
    return out;
}

inline double max_abs(const Tensor& a) {
    double m = 0.0;
    for (double v : a.values()) m = std::max(m, std::abs(v));
    return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    check_same_shape("max_abs_diff", a, b);
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// ---------------------------------------------------------------------------
// Deterministic RNG helpers. mt19937_64 bit-stream plus a fixed mapping so
// draws are identical across standard libraries.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Uniform in [0, 1): 53 random bits scaled.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Marsaglia polar method, deterministic given the bit stream.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = uniform(-1.0, 1.0);
            v = uniform(-1.0, 1.0);
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        have_spare_ = true;
        return u * f;
    }

    std::uint64_t next_u64() { return engine_(); }

    std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace pcdde
