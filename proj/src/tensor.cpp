#include "a3dseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "a3dseg/error.hpp"

namespace a3dseg {

Tensor Tensor::from(std::vector<int> dims, std::vector<float> data) {
    if (count(dims) != static_cast<std::int64_t>(data.size()))
        throw ContractError("tensor", "element count does not match shape");
    Tensor t;
    t.dims_ = std::move(dims);
    t.buf_ = std::make_shared<std::vector<float>>(std::move(data));
    return t;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.dims_ = dims_;
    t.buf_ = buf_ ? std::make_shared<std::vector<float>>(*buf_) : nullptr;
    return t;
}

void Tensor::fill(float v) {
    if (buf_) std::fill(buf_->begin(), buf_->end(), v);
}

Tensor Tensor::reshaped(std::vector<int> dims) const {
    if (count(dims) != numel())
        throw ContractError("tensor", "reshape changes element count");
    Tensor t;
    t.dims_ = std::move(dims);
    t.buf_ = buf_;
    return t;
}

double Tensor::sum() const {
    double s = 0.0;
    const float* p = data();
    for (std::int64_t i = 0, n = numel(); i < n; ++i) s += p[i];
    return s;
}

double Tensor::mean() const {
    std::int64_t n = numel();
    return n ? sum() / static_cast<double>(n) : 0.0;
}

float Tensor::max_abs() const {
    float m = 0.0f;
    const float* p = data();
    for (std::int64_t i = 0, n = numel(); i < n; ++i) m = std::max(m, std::fabs(p[i]));
    return m;
}

bool Tensor::all_finite() const {
    const float* p = data();
    for (std::int64_t i = 0, n = numel(); i < n; ++i)
        if (!std::isfinite(p[i])) return false;
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < dims_.size(); ++i) os << (i ? "x" : "") << dims_[i];
    os << ']';
    return os.str();
}

}  // namespace a3dseg
