// SPDX-License-Identifier: Apache-2.0

#ifndef ENCAP_TENSOR_HPP_
#define ENCAP_TENSOR_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "encap/errors.hpp"

namespace encap
{

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i)
            os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array of doubles with an optional gradient slot.
///
/// Rank-2 tensors are the working currency of every primitive; higher ranks
/// are views with a leading batch of rows (rows() multiplies all leading
/// extents), which is how [n x seq x V] logits and attention traces are stored.
class Tensor
{
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape))
    {
        validate_shape(shape_);
        data_.assign(shape_numel(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data))
    {
        validate_shape(shape_);
        if (data_.size() != shape_numel(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values)
    {
        return Tensor({rows, cols}, std::vector<double>(values));
    }

    static Tensor vector(std::initializer_list<double> values)
    {
        return Tensor({values.size()}, std::vector<double>(values));
    }

    static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    /// Product of all leading extents; 1 for rank-1 tensors.
    std::size_t rows() const noexcept
    {
        if (shape_.size() < 2)
            return shape_.empty() ? 0 : 1;
        return data_.size() / shape_.back();
    }
    std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    double& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
    std::span<const double> row(std::size_t r) const noexcept
    {
        return {data_.data() + r * cols(), cols()};
    }

    /// Same data, new shape with equal element count.
    Tensor reshaped(Shape shape) const
    {
        if (shape_numel(shape) != data_.size())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        Tensor out(std::move(shape), data_);
        return out;
    }

    double item() const
    {
        if (data_.size() != 1)
            throw ShapeError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    bool all_finite() const noexcept
    {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    double squared_norm() const noexcept
    {
        double s = 0.0;
        for (double v : data_)
            s += v * v;
        return s;
    }

    double max_abs() const noexcept
    {
        double m = 0.0;
        for (double v : data_)
            m = std::max(m, std::abs(v));
        return m;
    }

    bool requires_grad{false};
    /// Gradient storage; empty when absent, otherwise same length as data.
    std::vector<double> grad;

    bool has_grad() const noexcept { return !grad.empty(); }

    friend bool operator==(const Tensor& a, const Tensor& b)
    {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    static void validate_shape(const Shape& shape)
    {
        if (shape.empty())
            throw ShapeError("tensor shape must have at least one extent");
        for (std::size_t e : shape)
            if (e == 0)
                throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }

    Shape shape_;
    std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what)
{
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline void require_finite(const Tensor& t, const std::string& what)
{
    if (!t.all_finite())
        throw NumericError(what + ": non-finite value");
}

} // namespace encap

#endif // ENCAP_TENSOR_HPP_
