#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mbn {

// Dense rank-2 real array. Scalars are 1x1, row/column vectors are 1xN / Nx1.
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int r, int c, double fill = 0.0) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {
        if (r < 0 || c < 0) throw std::invalid_argument("Tensor: negative dimension");
    }

    static Tensor scalar(double v) {
        Tensor t(1, 1);
        t.data[0] = v;
        return t;
    }
    static Tensor row(std::vector<double> v) {
        Tensor t;
        t.rows = 1;
        t.cols = static_cast<int>(v.size());
        t.data = std::move(v);
        return t;
    }
    static Tensor column(std::vector<double> v) {
        Tensor t;
        t.rows = static_cast<int>(v.size());
        t.cols = 1;
        t.data = std::move(v);
        return t;
    }

    int size() const { return rows * cols; }
    bool is_scalar() const { return rows == 1 && cols == 1; }
    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    double value() const {
        if (!is_scalar()) throw std::logic_error("Tensor::value: not a scalar");
        return data[0];
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool operator==(const Tensor& o) const { return rows == o.rows && cols == o.cols && data == o.data; }
};

inline double row_dot(const Tensor& a, int ra, const Tensor& b, int rb) {
    double s = 0.0;
    for (int j = 0; j < a.cols; ++j) s += a.at(ra, j) * b.at(rb, j);
    return s;
}

inline double row_sq_dist(const Tensor& a, int ra, const Tensor& b, int rb) {
    double s = 0.0;
    for (int j = 0; j < a.cols; ++j) {
        double d = a.at(ra, j) - b.at(rb, j);
        s += d * d;
    }
    return s;
}

inline double row_norm(const Tensor& a, int r) { return std::sqrt(row_dot(a, r, a, r)); }

inline std::string shape_str(int r, int c) { return std::to_string(r) + "x" + std::to_string(c); }

}  // namespace mbn
