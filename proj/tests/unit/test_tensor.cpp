#include <gtest/gtest.h>

#include <sstream>

#include "dragonfly/random.hpp"
#include "dragonfly/tensor.hpp"

using namespace dragonfly;

TEST(Tensor, ShapeMustMatchValueCount) {
  EXPECT_THROW(Tensor<double>({2, 3}, Tensor<double>::Storage::Zero(5)), ShapeError);
  EXPECT_THROW(Tensor<double>({2, 0}), ShapeError);
  Tensor<double> t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6);
  EXPECT_EQ(t.rank(), 2);
}

TEST(Tensor, RowMajorIndexing) {
  Tensor<double> t({2, 3}, {0, 1, 2, 3, 4, 5});
  EXPECT_EQ(t.at(1, 2), 5);
  EXPECT_EQ(t.matrix()(1, 0), 3);
  Tensor<double> img({1, 2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  EXPECT_EQ(img.at(0, 1, 0, 1), 5);
}

TEST(TensorFile, HeaderLayoutIsLittleEndian) {
  Tensor<float> t({2, 1}, {1.0f, -2.0f});
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 4u + 1 + 1 + 2 * 4 + 2 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "DFT1");
  EXPECT_EQ(bytes[4], char(DType::Float32));
  EXPECT_EQ(bytes[5], char(2));
  EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 2u);
  EXPECT_EQ(bytes[7], 0);
  // 1.0f = 0x3F800000 stored LE
  EXPECT_EQ(static_cast<unsigned char>(bytes[14]), 0x00u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[17]), 0x3Fu);
}

TEST(TensorFile, RoundTripPreservesShapeAndBitsForRandomTensors) {
  Rng rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    Shape shape;
    const auto rank = 1 + rng.below(4);
    for (std::uint64_t r = 0; r < rank; ++r) shape.push_back(static_cast<Index>(1 + rng.below(5)));
    Tensor<double> t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = rng.normal() * 1e3;
    std::stringstream ss;
    write_tensor(ss, t);
    EXPECT_EQ(read_tensor<double>(ss), t);
  }
}

TEST(TensorFile, ReadsAcrossDtypes) {
  Tensor<std::int32_t> labels({3}, {0, 1, 3});
  std::stringstream ss;
  write_tensor(ss, labels);
  auto as_double = read_tensor<double>(ss);
  EXPECT_EQ(as_double[2], 3.0);
}

TEST(TensorFile, RejectsCorruptInput) {
  std::stringstream bad_magic("DFT2\x02\x01");
  EXPECT_THROW(read_tensor<double>(bad_magic), IoError);

  Tensor<double> t({4}, 2.0);
  std::stringstream ss;
  write_tensor(ss, t);
  std::string bytes = ss.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_tensor<double>(truncated), IoError);
  std::stringstream trailing(bytes + "x");
  EXPECT_THROW(read_tensor<double>(trailing), IoError);
  std::string bad_dtype = bytes;
  bad_dtype[4] = 9;
  std::stringstream dtype_stream(bad_dtype);
  EXPECT_THROW(read_tensor<double>(dtype_stream), IoError);
}
