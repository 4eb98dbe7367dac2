#include "dragonfly/tensor.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dragonfly {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

namespace {

void check_extents(const Shape& shape) {
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("tensor: non-positive extent in shape " + shape_string(shape));
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  values_ = Storage::Constant(shape_size(shape_), fill);
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Storage values) : shape_(std::move(shape)), values_(std::move(values)) {
  check_extents(shape_);
  if (shape_size(shape_) != values_.size()) {
    throw ShapeError("tensor: shape " + shape_string(shape_) + " does not match " +
                     std::to_string(values_.size()) + " values");
  }
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, std::initializer_list<Scalar> values)
    : Tensor(std::move(shape), Storage(Eigen::Map<const Storage>(values.begin(), static_cast<Index>(values.size())))) {}

template <typename Scalar>
typename Tensor<Scalar>::MatrixMap Tensor<Scalar>::matrix(Index rows, Index cols) {
  if (rows * cols != size()) throw ShapeError("tensor: matrix view does not cover " + shape_string(shape_));
  return MatrixMap(values_.data(), rows, cols);
}

template <typename Scalar>
typename Tensor<Scalar>::ConstMatrixMap Tensor<Scalar>::matrix(Index rows, Index cols) const {
  if (rows * cols != size()) throw ShapeError("tensor: matrix view does not cover " + shape_string(shape_));
  return ConstMatrixMap(values_.data(), rows, cols);
}

template <typename Scalar>
bool Tensor<Scalar>::all_finite() const {
  if constexpr (std::is_floating_point_v<Scalar>) {
    return values_.isFinite().all();
  } else {
    return true;
  }
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::reshaped(Shape shape) const {
  if (shape_size(shape) != size()) {
    throw ShapeError("reshape: " + shape_string(shape_) + " -> " + shape_string(shape));
  }
  return Tensor(std::move(shape), values_);
}

template class Tensor<float>;
template class Tensor<double>;
template class Tensor<std::int32_t>;

// ---- DFT1 serialization -------------------------------------------------

namespace {

constexpr std::array<char, 4> kMagic{'D', 'F', 'T', '1'};

template <typename T>
void put_le(std::ostream& out, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits;
  std::memcpy(&bits, &value, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T); ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(std::istream& in, const std::string& origin) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  std::array<unsigned char, sizeof(T)> buf{};
  if (!in.read(reinterpret_cast<char*>(buf.data()), sizeof(T))) {
    throw IoError("DFT1: truncated data in " + origin);
  }
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(buf[i]) << (8 * i);
  T value;
  std::memcpy(&value, &bits, sizeof(T));
  return value;
}

template <typename Raw, typename Scalar>
void read_values(std::istream& in, Tensor<Scalar>& t, const std::string& origin) {
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(get_le<Raw>(in, origin));
}

}  // namespace

template <typename Scalar>
void write_tensor(std::ostream& out, const Tensor<Scalar>& tensor) {
  out.write(kMagic.data(), kMagic.size());
  out.put(static_cast<char>(dtype_of<Scalar>()));
  if (tensor.rank() > 255) throw ShapeError("DFT1: rank exceeds 255");
  out.put(static_cast<char>(tensor.rank()));
  for (Index d : tensor.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (Index i = 0; i < tensor.size(); ++i) put_le<Scalar>(out, tensor[i]);
}

template <typename Scalar>
void write_tensor(const std::filesystem::path& path, const Tensor<Scalar>& tensor) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  write_tensor(out, tensor);
  if (!out) throw IoError("write failed: " + path.string());
}

template <typename Scalar>
Tensor<Scalar> read_tensor(std::istream& in, const std::string& origin) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw IoError("DFT1: bad magic in " + origin);
  }
  const int code = in.get();
  const int rank = in.get();
  if (code == EOF || rank == EOF) throw IoError("DFT1: truncated header in " + origin);
  if (rank == 0) throw IoError("DFT1: zero rank in " + origin);
  Shape shape(static_cast<std::size_t>(rank));
  for (auto& d : shape) {
    d = static_cast<Index>(get_le<std::uint32_t>(in, origin));
    if (d == 0) throw IoError("DFT1: zero extent in " + origin);
  }
  Tensor<Scalar> t(shape);
  switch (static_cast<DType>(code)) {
    case DType::Float32: read_values<float>(in, t, origin); break;
    case DType::Float64: read_values<double>(in, t, origin); break;
    case DType::Int32: read_values<std::int32_t>(in, t, origin); break;
    default: throw IoError("DFT1: unknown dtype code " + std::to_string(code) + " in " + origin);
  }
  if (in.peek() != EOF) throw IoError("DFT1: trailing bytes in " + origin);
  return t;
}

template <typename Scalar>
Tensor<Scalar> read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return read_tensor<Scalar>(in, path.string());
}

#define DRAGONFLY_INSTANTIATE_IO(T)                                                   \
  template void write_tensor<T>(std::ostream&, const Tensor<T>&);                      \
  template void write_tensor<T>(const std::filesystem::path&, const Tensor<T>&);       \
  template Tensor<T> read_tensor<T>(std::istream&, const std::string&);                \
  template Tensor<T> read_tensor<T>(const std::filesystem::path&);

DRAGONFLY_INSTANTIATE_IO(float)
DRAGONFLY_INSTANTIATE_IO(double)
DRAGONFLY_INSTANTIATE_IO(std::int32_t)

#undef DRAGONFLY_INSTANTIATE_IO

}  // namespace dragonfly
