#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace convneur {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major array of doubles. Channels-first for feature maps: [C, H, W].
// The gradient buffer is optional and only allocated for parameters.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double value);
    static Tensor from(std::initializer_list<std::size_t> shape, std::initializer_list<double> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& values() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    double& at(std::size_t i, std::size_t j);
    double at(std::size_t i, std::size_t j) const;
    double& at(std::size_t i, std::size_t j, std::size_t k);
    double at(std::size_t i, std::size_t j, std::size_t k) const;

    double item() const;

    // Same data, new extents. Element count must agree.
    Tensor reshaped(Shape shape) const;

    bool has_grad() const noexcept { return !grad_.empty(); }
    std::span<double> grad();
    std::span<const double> grad() const noexcept { return grad_; }
    void zero_grad();
    void drop_grad() noexcept { grad_.clear(); }

    bool all_finite() const noexcept;

private:
    Shape shape_;
    std::vector<double> data_;
    std::vector<double> grad_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& t);
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace convneur
