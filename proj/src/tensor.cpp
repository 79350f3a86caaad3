#include "latentkit/tensor.hpp"

#include <cmath>
#include <sstream>

namespace latentkit {

namespace {

// Parallel regions only pay off above this output-work size; threshold on
// problem size keeps results independent of thread count either way.
constexpr int64_t kParallelFlops = 64 * 1024;

void check_2d(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected 2-D tensor, got " + t.shape_str());
    }
}

} // namespace

int64_t Tensor::numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t e : s) {
        if (e <= 0) throw DimensionError("tensor: nonpositive extent in shape");
        n *= e;
    }
    return n;
}

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << " x ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

Tensor identity(int64_t n) {
    Tensor t({n, n});
    for (int64_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    if (a.shape[1] != b.shape[0]) {
        throw DimensionError("matmul: inner dimensions mismatch " + a.shape_str() + " vs " +
                             b.shape_str());
    }
    const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor c({m, n});
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* pc = c.data.data();
#pragma omp parallel for schedule(static) if (m * n * k >= kParallelFlops)
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) acc += pa[i * k + p] * pb[p * n + j];
            pc[i * n + j] = acc;
        }
    }
    return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    check_2d(a, "matmul_tn");
    check_2d(b, "matmul_tn");
    if (a.shape[0] != b.shape[0]) {
        throw DimensionError("matmul_tn: inner dimensions mismatch " + a.shape_str() + " vs " +
                             b.shape_str());
    }
    const int64_t m = a.shape[1], k = a.shape[0], n = b.shape[1];
    Tensor c({m, n});
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* pc = c.data.data();
#pragma omp parallel for schedule(static) if (m * n * k >= kParallelFlops)
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) acc += pa[p * m + i] * pb[p * n + j];
            pc[i * n + j] = acc;
        }
    }
    return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    check_2d(a, "matmul_nt");
    check_2d(b, "matmul_nt");
    if (a.shape[1] != b.shape[1]) {
        throw DimensionError("matmul_nt: inner dimensions mismatch " + a.shape_str() + " vs " +
                             b.shape_str());
    }
    const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
    Tensor c({m, n});
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* pc = c.data.data();
#pragma omp parallel for schedule(static) if (m * n * k >= kParallelFlops)
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) acc += pa[i * k + p] * pb[j * k + p];
            pc[i * n + j] = acc;
        }
    }
    return c;
}

Tensor transpose(const Tensor& a) {
    check_2d(a, "transpose");
    Tensor t({a.shape[1], a.shape[0]});
    for (int64_t i = 0; i < a.shape[0]; ++i)
        for (int64_t j = 0; j < a.shape[1]; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.rank()) {
        throw IndexError("softmax: axis " + std::to_string(axis) + " invalid for " + x.shape_str());
    }
    const int64_t len = x.shape[static_cast<size_t>(axis)];
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape[static_cast<size_t>(i)];
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape[static_cast<size_t>(i)];

    Tensor y(x.shape);
    const double* px = x.data.data();
    double* py = y.data.data();
    const int64_t lanes = outer * inner;
#pragma omp parallel for schedule(static) if (lanes * len >= kParallelFlops)
    for (int64_t lane = 0; lane < lanes; ++lane) {
        const int64_t o = lane / inner, in = lane % inner;
        const int64_t base = o * len * inner + in;
        double mx = px[base];
        for (int64_t j = 1; j < len; ++j) mx = std::max(mx, px[base + j * inner]);
        double sum = 0.0;
        for (int64_t j = 0; j < len; ++j) {
            double e = std::exp(px[base + j * inner] - mx);
            py[base + j * inner] = e;
            sum += e;
        }
        for (int64_t j = 0; j < len; ++j) py[base + j * inner] /= sum;
    }
    return y;
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
    const int64_t d = x.shape.back();
    if (gain.numel() != d) {
        throw DimensionError("rmsnorm: gain length " + std::to_string(gain.numel()) +
                             " != last extent of " + x.shape_str());
    }
    const int64_t rows = x.numel() / d;
    Tensor y(x.shape);
    const double* px = x.data.data();
    const double* pg = gain.data.data();
    double* py = y.data.data();
#pragma omp parallel for schedule(static) if (rows * d >= kParallelFlops)
    for (int64_t r = 0; r < rows; ++r) {
        double ms = 0.0;
        for (int64_t j = 0; j < d; ++j) ms += px[r * d + j] * px[r * d + j];
        ms = ms / static_cast<double>(d) + eps;
        const double inv = ms > 0.0 ? 1.0 / std::sqrt(ms) : 0.0;
        for (int64_t j = 0; j < d; ++j) py[r * d + j] = pg[j] * px[r * d + j] * inv;
    }
    return y;
}

double cross_entropy(const Tensor& logits, int64_t target) {
    if (logits.rank() != 1) {
        throw DimensionError("cross_entropy: expected 1-D logits, got " + logits.shape_str());
    }
    const int64_t v = logits.shape[0];
    if (target < 0 || target >= v) {
        throw IndexError("cross_entropy: target " + std::to_string(target) + " out of range [0, " +
                         std::to_string(v) + ")");
    }
    double mx = logits.data[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, logits.data[static_cast<size_t>(j)]);
    double sum = 0.0;
    for (int64_t j = 0; j < v; ++j) sum += std::exp(logits.data[static_cast<size_t>(j)] - mx);
    double loss = -(logits.data[static_cast<size_t>(target)] - mx - std::log(sum));
    return std::max(0.0, loss);
}

double row_log_softmax_at(const Tensor& logits, int64_t r, int64_t target) {
    const int64_t v = logits.shape[1];
    if (target < 0 || target >= v) {
        throw IndexError("row_log_softmax_at: target " + std::to_string(target) +
                         " out of range [0, " + std::to_string(v) + ")");
    }
    const double* row = logits.row(r);
    double mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
    return row[target] - mx - std::log(sum);
}

void add_inplace(Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw DimensionError("add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

Tensor scale(const Tensor& a, double s) {
    Tensor y = a;
    for (double& v : y.data) v *= s;
    return y;
}

void add_cross_entropy_grad(const Tensor& logits, int64_t row, int64_t target, double coef,
                            Tensor& dlogits) {
    const int64_t v = logits.shape[1];
    if (target < 0 || target >= v) {
        throw IndexError("cross_entropy grad: target " + std::to_string(target) +
                         " out of range [0, " + std::to_string(v) + ")");
    }
    const double* lrow = logits.row(row);
    double mx = lrow[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, lrow[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < v; ++j) sum += std::exp(lrow[j] - mx);
    for (int64_t j = 0; j < v; ++j) {
        const double p = std::exp(lrow[j] - mx) / sum;
        dlogits.at(row, j) += coef * (p - (j == target ? 1.0 : 0.0));
    }
}

} // namespace latentkit
