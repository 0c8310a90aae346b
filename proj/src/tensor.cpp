#include "c3owd/tensor.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace c3owd {

Index shape_product(const std::vector<Index>& shape) {
    Index p = 1;
    for (Index d : shape) p *= d;
    return p;
}

Tensor::Tensor(std::vector<Index> shape) : shape_(std::move(shape)) {
    require(!shape_.empty(), "Tensor: empty shape");
    for (Index d : shape_) require(d >= 1, "Tensor: dimension sizes must be positive");
    data_ = Vecd::Zero(shape_product(shape_));
}

Tensor::Tensor(std::vector<Index> shape, Vecd data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(!shape_.empty(), "Tensor: empty shape");
    for (Index d : shape_) require(d >= 1, "Tensor: dimension sizes must be positive");
    require(shape_product(shape_) == data_.size(), "Tensor: shape/data size mismatch");
}

Tensor Tensor::from_matrix(const Matd& m) {
    Tensor t({m.rows(), m.cols()});
    t.matrix(m.rows(), m.cols()) = m;
    return t;
}

Tensor Tensor::zeros(std::vector<Index> shape) { return Tensor(std::move(shape)); }

Eigen::Map<const Matd> Tensor::matrix(Index rows, Index cols) const {
    require(rows * cols == data_.size(), "Tensor::matrix: view size mismatch");
    return Eigen::Map<const Matd>(data_.data(), rows, cols);
}

Eigen::Map<Matd> Tensor::matrix(Index rows, Index cols) {
    require(rows * cols == data_.size(), "Tensor::matrix: view size mismatch");
    return Eigen::Map<Matd>(data_.data(), rows, cols);
}

Eigen::Map<const Matd> Tensor::plane(Index c) const {
    require(rank() == 3, "Tensor::plane: rank-3 tensor required");
    require(c >= 0 && c < shape_[0], "Tensor::plane: channel out of range");
    const Index h = shape_[1], w = shape_[2];
    return Eigen::Map<const Matd>(data_.data() + c * h * w, h, w);
}

Eigen::Map<Matd> Tensor::plane(Index c) {
    require(rank() == 3, "Tensor::plane: rank-3 tensor required");
    require(c >= 0 && c < shape_[0], "Tensor::plane: channel out of range");
    const Index h = shape_[1], w = shape_[2];
    return Eigen::Map<Matd>(data_.data() + c * h * w, h, w);
}

Eigen::Map<const Matd> Tensor::rows_over_last_axis() const {
    const Index c = shape_.back();
    return Eigen::Map<const Matd>(data_.data(), data_.size() / c, c);
}

Eigen::Map<Matd> Tensor::rows_over_last_axis() {
    const Index c = shape_.back();
    return Eigen::Map<Matd>(data_.data(), data_.size() / c, c);
}

void Tensor::require_all_finite(const std::string& where) const {
    if (!data_.allFinite()) throw NumericError("non-finite value in " + where);
}

Index Tensor::offset(std::initializer_list<Index> idx) const {
    require(static_cast<Index>(idx.size()) == rank(), "Tensor: index rank mismatch");
    Index off = 0;
    std::size_t axis = 0;
    for (Index i : idx) {
        require(i >= 0 && i < shape_[axis], "Tensor: index out of range");
        off = off * shape_[axis] + i;
        ++axis;
    }
    return off;
}

void write_tensor_csv(const Tensor& t, std::ostream& os) {
    require(t.rank() >= 1 && t.size() >= 1, "write_tensor_csv: empty tensor");
    os << "shape=";
    for (Index a = 0; a < t.rank(); ++a) {
        if (a) os << 'x';
        os << t.shape()[static_cast<std::size_t>(a)];
    }
    os << '\n';
    const Index cols = t.shape().back();
    const Index rows = t.size() / cols;
    char buf[64];
    for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c) {
            if (c) os << ',';
            std::snprintf(buf, sizeof(buf), "%.17g", t.data()(r * cols + c));
            os << buf;
        }
        os << '\n';
    }
}

void write_tensor_csv(const Tensor& t, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_tensor_csv: cannot open " + path);
    write_tensor_csv(t, f);
    f.flush();
    if (!f) throw std::runtime_error("write_tensor_csv: write failed for " + path);
}

Tensor read_tensor_csv(std::istream& is) {
    std::string header;
    if (!std::getline(is, header)) throw InvalidArgument("read_tensor_csv: missing header");
    const std::string prefix = "shape=";
    require(header.rfind(prefix, 0) == 0, "read_tensor_csv: header must start with shape=");
    std::vector<Index> shape;
    {
        std::stringstream ss(header.substr(prefix.size()));
        std::string part;
        while (std::getline(ss, part, 'x')) {
            require(!part.empty(), "read_tensor_csv: malformed shape header");
            shape.push_back(static_cast<Index>(std::stoll(part)));
        }
    }
    require(!shape.empty(), "read_tensor_csv: empty shape header");
    const Index total = shape_product(shape);
    Vecd data(total);
    Index seen = 0;
    std::string line;
    while (seen < total && std::getline(is, line)) {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            require(seen < total, "read_tensor_csv: more values than shape allows");
            data(seen++) = std::stod(cell);
        }
    }
    require(seen == total, "read_tensor_csv: fewer values than shape requires");
    return Tensor(std::move(shape), std::move(data));
}

Tensor read_tensor_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("read_tensor_csv: cannot open " + path);
    return read_tensor_csv(f);
}

}  // namespace c3owd
