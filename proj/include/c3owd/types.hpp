#ifndef C3OWD_TYPES_HPP
#define C3OWD_TYPES_HPP

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace c3owd {

// Row-major dense matrices so flat tensor storage maps without copies.
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matd = Mat<double>;
using Vecd = Vec<double>;
using Index = Eigen::Index;

/// Violated precondition or malformed input.
struct InvalidArgument : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Non-finite value escaped a numeric kernel.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw InvalidArgument(msg);
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
    return m.allFinite();
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const std::string& where) {
    if (!m.allFinite()) throw NumericError("non-finite value in " + where);
}

}  // namespace c3owd

#endif
