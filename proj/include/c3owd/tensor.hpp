#ifndef C3OWD_TENSOR_HPP
#define C3OWD_TENSOR_HPP

#include <initializer_list>
#include <iosfwd>
#include <numeric>
#include <string>
#include <vector>

#include "c3owd/types.hpp"

namespace c3owd {

/// Dense multi-dimensional array with row-major flat storage.
///
/// The universal value carrier between modules and for file I/O. Math is done
/// through Eigen views (matrix()/plane()) rather than element loops.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<Index> shape);
    Tensor(std::vector<Index> shape, Vecd data);

    static Tensor from_matrix(const Matd& m);
    static Tensor zeros(std::vector<Index> shape);

    const std::vector<Index>& shape() const { return shape_; }
    Index rank() const { return static_cast<Index>(shape_.size()); }
    Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    Index size() const { return data_.size(); }

    const Vecd& data() const { return data_; }
    Vecd& data() { return data_; }

    double operator()(std::initializer_list<Index> idx) const { return data_(offset(idx)); }
    double& operator()(std::initializer_list<Index> idx) { return data_(offset(idx)); }

    /// View as a rows x cols row-major matrix; product must equal size().
    Eigen::Map<const Matd> matrix(Index rows, Index cols) const;
    Eigen::Map<Matd> matrix(Index rows, Index cols);

    /// View of a rank-3 [C, H, W] tensor's channel c as an H x W matrix.
    Eigen::Map<const Matd> plane(Index c) const;
    Eigen::Map<Matd> plane(Index c);

    /// Flatten [..., C] to a (size/C) x C matrix over the trailing axis.
    Eigen::Map<const Matd> rows_over_last_axis() const;
    Eigen::Map<Matd> rows_over_last_axis();

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    void require_all_finite(const std::string& where) const;

  private:
    Index offset(std::initializer_list<Index> idx) const;

    std::vector<Index> shape_;
    Vecd data_;
};

Index shape_product(const std::vector<Index>& shape);

/// CSV form: one header line `shape=d1xd2x...`, then row-major values grouped
/// as prod(shape[:-1]) lines of shape[-1] comma-separated values, printed at
/// 17 significant digits so round-trips are value-exact.
void write_tensor_csv(const Tensor& t, std::ostream& os);
void write_tensor_csv(const Tensor& t, const std::string& path);
Tensor read_tensor_csv(std::istream& is);
Tensor read_tensor_csv(const std::string& path);

}  // namespace c3owd

#endif
