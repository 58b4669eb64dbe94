#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pbc/errors.hpp"

namespace pbc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape)
{
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

inline std::string to_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major array of rank <= 4 with an optional gradient buffer of the
// same shape.
template <class T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, T fill = T{})
        : shape_(std::move(shape))
    {
        check_rank();
        data_.assign(shape_size(shape_), fill);
    }

    BasicTensor(Shape shape, std::vector<T> values)
        : shape_(std::move(shape)), data_(std::move(values))
    {
        check_rank();
        if (data_.size() != shape_size(shape_))
            throw ShapeError("tensor: " + std::to_string(data_.size()) + " values do not fill shape " +
                             pbc::to_string(shape_));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    bool has_grad() const noexcept { return grad_.has_value(); }

    // Allocates a zeroed gradient on first use.
    std::span<T> grad()
    {
        if (!grad_) grad_.emplace(data_.size(), T{});
        return *grad_;
    }
    std::span<const T> grad() const
    {
        if (!grad_) throw std::logic_error("tensor has no gradient");
        return *grad_;
    }
    void clear_grad() noexcept { grad_.reset(); }

    void reshape(Shape shape)
    {
        if (shape_size(shape) != data_.size())
            throw ShapeError("tensor: cannot reshape " + pbc::to_string(shape_) + " to " + pbc::to_string(shape));
        shape_ = std::move(shape);
        check_rank();
    }

    template <class U>
    BasicTensor<U> cast() const
    {
        if (shape_.empty() && data_.empty()) return {};
        return BasicTensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    friend bool operator==(const BasicTensor& a, const BasicTensor& b)
    {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void check_rank() const
    {
        if (shape_.size() > 4) throw ShapeError("tensor: rank " + std::to_string(shape_.size()) + " exceeds 4");
    }

    Shape shape_;
    std::vector<T> data_;
    std::optional<std::vector<T>> grad_;
};

using Tensor = BasicTensor<float>;

} // namespace pbc
