#pragma once

#include <Eigen/Core>
#include <cstring>
#include <fstream>
#include <memory>
#include <type_traits>
#include <utility>

#include "cvattn/common.hpp"
#include "cvattn/rng.hpp"

namespace cvattn {

/// Dense n-d array with shape metadata, the universal value type.
///
/// Layout is row-major with the conventional (N, C, H, W) axis order for
/// rank-4 data. Storage is shared and treated as frozen once the tensor has
/// been consumed by an operation; builders fill via raw()/mutable_data()
/// first. Scalars are rank 0 (empty shape, one element). A default
/// constructed tensor is "undefined" and stands for an absent optional
/// argument (e.g. a conv without bias).
template <typename S>
class Tensor {
    static_assert(std::is_floating_point_v<S>);

public:
    using Scalar = S;
    using Storage = Eigen::Array<S, Eigen::Dynamic, 1>;

    Tensor() = default;

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), S(0)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), S(1)); }
    static Tensor full(Shape shape, S v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(S v) { return Tensor(Shape{}, v); }

    static Tensor from_vector(Shape shape, const std::vector<S>& values) {
        Tensor t(shape, S(0));
        if (static_cast<Index>(values.size()) != t.numel()) {
            throw ShapeError("from_vector: " + std::to_string(values.size()) +
                             " values for shape " + shape_str(shape));
        }
        std::copy(values.begin(), values.end(), t.data_->data());
        return t;
    }

    static Tensor uniform(Shape shape, Rng& rng, S lo, S hi) {
        Tensor t(std::move(shape), S(0));
        for (Index i = 0; i < t.numel(); ++i) {
            t.raw()[i] = static_cast<S>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
        }
        return t;
    }

    bool defined() const { return data_ != nullptr; }
    Index numel() const { return data_ ? static_cast<Index>(data_->size()) : 0; }
    int rank() const { return static_cast<int>(shape_.size()); }
    const Shape& shape() const { return shape_; }
    Index extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool v) {
        requires_grad_ = v;
        return *this;
    }

    /// Identity for gradient bookkeeping: the shared storage address.
    const void* id() const { return data_.get(); }

    const Storage& array() const { return *data_; }
    Storage& raw() { return *data_; }
    const S* data() const { return data_->data(); }
    S* mutable_data() { return data_->data(); }

    S value() const {
        if (numel() != 1) throw ShapeError("value(): tensor has " + std::to_string(numel()) + " elements");
        return (*data_)[0];
    }
    S at(Index flat) const { return (*data_)[flat]; }

    S operator()(Index i, Index j) const { return (*data_)[i * shape_[1] + j]; }
    S operator()(Index n, Index c, Index h, Index w) const {
        return (*data_)[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    bool all_finite() const { return data_->allFinite(); }

    /// Deep copy with fresh storage (new identity).
    Tensor clone() const {
        Tensor t(shape_, S(0));
        t.raw() = *data_;
        t.requires_grad_ = requires_grad_;
        return t;
    }

    bool same_values(const Tensor& o) const {
        return defined() && o.defined() && shape_ == o.shape_ &&
               std::memcmp(data(), o.data(), sizeof(S) * static_cast<std::size_t>(numel())) == 0;
    }

private:
    Tensor(Shape shape, S fill) : shape_(std::move(shape)) {
        const Index n = numel_of(shape_);
        for (Index e : shape_) {
            if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape_));
        }
        data_ = std::make_shared<Storage>(n);
        data_->setConstant(fill);
    }

    Shape shape_;
    std::shared_ptr<Storage> data_;
    bool requires_grad_ = false;
};

template <typename S>
void ensure_finite(const Tensor<S>& t, const char* op) {
    if (!t.all_finite()) {
        for (Index i = 0; i < t.numel(); ++i) {
            if (!std::isfinite(t.at(i))) {
                throw NumericError(std::string(op) + ": non-finite value at flat index " +
                                   std::to_string(i));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// TNSR dump format: "TNSR", u32 rank, rank x u32 extents, u8 dtype
// (0 = f32, 1 = f64), values little-endian row-major. Bit-exact round-trip.
// ---------------------------------------------------------------------------

namespace detail {
static_assert(sizeof(float) == 4 && sizeof(double) == 8);

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
}  // namespace detail

template <typename S>
void write_tnsr(const Tensor<S>& t, std::ostream& os) {
    os.write("TNSR", 4);
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) detail::put_u32(os, static_cast<std::uint32_t>(t.extent(i)));
    const unsigned char dtype = std::is_same_v<S, float> ? 0 : 1;
    os.write(reinterpret_cast<const char*>(&dtype), 1);
    // Host is little-endian on every supported target; raw write is the LE encoding.
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(sizeof(S) * t.numel()));
}

template <typename S>
void write_tnsr(const Tensor<S>& t, const std::string& path) {
    atomic_write(path, [&](const std::string& tmp) {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("cannot open for writing: " + tmp);
        write_tnsr(t, os);
        if (!os) throw IoError("write failed: " + tmp);
    });
}

/// Reads the dtype tag without consuming the payload semantics; 0=f32, 1=f64.
inline int tnsr_dtype(std::istream& is) {
    const auto start = is.tellg();
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "TNSR", 4) != 0) throw IoError("bad TNSR magic");
    const std::uint32_t rank = detail::get_u32(is);
    if (rank > 8) throw IoError("TNSR rank too large: " + std::to_string(rank));
    for (std::uint32_t i = 0; i < rank; ++i) detail::get_u32(is);
    unsigned char dtype = 0xff;
    is.read(reinterpret_cast<char*>(&dtype), 1);
    if (!is || dtype > 1) throw IoError("bad TNSR dtype tag");
    is.seekg(start);
    return dtype;
}

template <typename S>
Tensor<S> read_tnsr(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "TNSR", 4) != 0) throw IoError("bad TNSR magic");
    const std::uint32_t rank = detail::get_u32(is);
    if (rank > 8) throw IoError("TNSR rank too large: " + std::to_string(rank));
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<Index>(detail::get_u32(is));
    unsigned char dtype = 0xff;
    is.read(reinterpret_cast<char*>(&dtype), 1);
    const unsigned char want = std::is_same_v<S, float> ? 0 : 1;
    if (dtype != want) {
        throw IoError("TNSR dtype mismatch: file has " + std::string(dtype == 0 ? "f32" : "f64"));
    }
    Tensor<S> t = Tensor<S>::zeros(shape);
    is.read(reinterpret_cast<char*>(t.mutable_data()), static_cast<std::streamsize>(sizeof(S) * t.numel()));
    if (!is) throw IoError("truncated TNSR payload");
    return t;
}

template <typename S>
Tensor<S> read_tnsr(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    return read_tnsr<S>(is);
}

}  // namespace cvattn
