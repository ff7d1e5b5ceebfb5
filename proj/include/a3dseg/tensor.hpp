#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

namespace a3dseg {

// Dense row-major float tensor with shared storage. Assignment shares the
// buffer (parameters and their autodiff leaves alias the same memory);
// clone() deep-copies. Rank is dynamic: images are NCHW, volumes NCDHW,
// scalars rank-1 of size 1.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> dims, float fill = 0.0f)
        : dims_(std::move(dims)),
          buf_(std::make_shared<std::vector<float>>(count(dims_), fill)) {}

    static Tensor scalar(float v) {
        Tensor t({1});
        (*t.buf_)[0] = v;
        return t;
    }

    static Tensor from(std::vector<int> dims, std::vector<float> data);

    bool empty() const { return !buf_; }
    int rank() const { return static_cast<int>(dims_.size()); }
    int dim(int i) const { return dims_[static_cast<size_t>(i)]; }
    const std::vector<int>& dims() const { return dims_; }
    std::int64_t numel() const { return buf_ ? static_cast<std::int64_t>(buf_->size()) : 0; }

    float* data() { return buf_->data(); }
    const float* data() const { return buf_->data(); }

    float& operator[](std::int64_t i) { return (*buf_)[static_cast<size_t>(i)]; }
    float operator[](std::int64_t i) const { return (*buf_)[static_cast<size_t>(i)]; }

    float& at(int i, int j) { return (*buf_)[static_cast<size_t>(i) * dims_[1] + j]; }
    float at(int i, int j) const { return (*buf_)[static_cast<size_t>(i) * dims_[1] + j]; }
    float& at(int i, int j, int k) {
        return (*buf_)[(static_cast<size_t>(i) * dims_[1] + j) * dims_[2] + k];
    }
    float at(int i, int j, int k) const {
        return (*buf_)[(static_cast<size_t>(i) * dims_[1] + j) * dims_[2] + k];
    }
    float& at(int i, int j, int k, int l) {
        return (*buf_)[((static_cast<size_t>(i) * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
    }
    float at(int i, int j, int k, int l) const {
        return (*buf_)[((static_cast<size_t>(i) * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
    }
    float& at(int i, int j, int k, int l, int m) {
        return (*buf_)[(((static_cast<size_t>(i) * dims_[1] + j) * dims_[2] + k) * dims_[3] + l) *
                           dims_[4] +
                       m];
    }
    float at(int i, int j, int k, int l, int m) const {
        return (*buf_)[(((static_cast<size_t>(i) * dims_[1] + j) * dims_[2] + k) * dims_[3] + l) *
                           dims_[4] +
                       m];
    }

    Tensor clone() const;
    void fill(float v);
    void zero() { fill(0.0f); }

    bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }
    bool shares_buffer(const Tensor& o) const { return buf_ == o.buf_; }

    // Reinterpret with a new shape of identical element count; shares storage.
    Tensor reshaped(std::vector<int> dims) const;

    double sum() const;           // double accumulation
    double mean() const;
    float max_abs() const;
    bool all_finite() const;

    std::string shape_str() const;

    static std::int64_t count(const std::vector<int>& dims) {
        std::int64_t n = 1;
        for (int d : dims) n *= d;
        return dims.empty() ? 0 : n;
    }

private:
    std::vector<int> dims_;
    std::shared_ptr<std::vector<float>> buf_;
};

}  // namespace a3dseg
