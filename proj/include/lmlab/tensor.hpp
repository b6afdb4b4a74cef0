#pragma once

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lmlab/util.hpp"

namespace lmlab {

// Dense row-major tensor. Everything the model, optimizer states and
// activations allocate goes through TrackedAllocator so resource metering
// can report a peak over model + optimizer + activation arenas.
template <typename T>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
        std::int64_t n = 1;
        for (std::int64_t d : shape_) {
            if (d < 0) throw std::invalid_argument("negative tensor dimension");
            n *= d;
        }
        data_.assign(static_cast<std::size_t>(n), T{});
    }

    Tensor(std::initializer_list<std::int64_t> shape)
        : Tensor(std::vector<std::int64_t>(shape)) {}

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_vec()); }

    std::span<const std::int64_t> shape() const { return shape_; }
    std::vector<std::int64_t> shape_vec() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // 2-D access
    T& operator()(std::int64_t i, std::int64_t j) {
        assert(rank() == 2);
        return data_[static_cast<std::size_t>(i * shape_[1] + j)];
    }
    const T& operator()(std::int64_t i, std::int64_t j) const {
        assert(rank() == 2);
        return data_[static_cast<std::size_t>(i * shape_[1] + j)];
    }

    void fill(T v) {
        for (auto& x : data_) x = v;
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    std::span<T> flat() { return {data_.data(), data_.size()}; }
    std::span<const T> flat() const { return {data_.data(), data_.size()}; }

  private:
    std::vector<std::int64_t> shape_;
    std::vector<T, TrackedAllocator<T>> data_;
};

// C = A[m x k] * B[k x n]; loop order keeps the inner loop contiguous.
template <typename T>
void matmul(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    assert(b.dim(0) == k && c.dim(0) == m && c.dim(1) == n);
    c.fill(T{});
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = c.data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const T aik = pa[i * k + kk];
            const T* brow = pb + kk * n;
            T* crow = pc + i * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

// C += A^T[m x k]^T... i.e. C[k x n] += A[m x k]^T * B[m x n]
template <typename T>
void matmul_at_b_accum(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    assert(b.dim(0) == m && c.dim(0) == k && c.dim(1) == n);
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = c.data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const T aik = pa[i * k + kk];
            const T* brow = pb + i * n;
            T* crow = pc + kk * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

// C = A[m x k] * B[n x k]^T
template <typename T>
void matmul_a_bt(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    assert(b.dim(1) == k && c.dim(0) == m && c.dim(1) == n);
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = c.data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            T acc{};
            const T* arow = pa + i * k;
            const T* brow = pb + j * k;
            for (std::int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            pc[i * n + j] = acc;
        }
    }
}

// Ordered name -> tensor map with deterministic iteration (insertion order).
template <typename T>
class TensorMap {
  public:
    void add(std::string name, Tensor<T> value) {
        if (index_.count(name)) throw std::invalid_argument("duplicate tensor name: " + name);
        index_[name] = items_.size();
        items_.emplace_back(std::move(name), std::move(value));
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no tensor named: " + name);
        return items_[it->second].second;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no tensor named: " + name);
        return items_[it->second].second;
    }

    std::size_t size() const { return items_.size(); }
    bool empty() const { return items_.empty(); }

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

  private:
    std::vector<std::pair<std::string, Tensor<T>>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace lmlab
