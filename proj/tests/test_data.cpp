#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "fedcada/data.hpp"
#include "test_util.hpp"

using namespace fedcada;

namespace {

void expect_exact_partition(const std::vector<ClientShard>& shards, std::size_t n) {
  std::vector<std::size_t> all;
  for (const auto& s : shards) {
    all.insert(all.end(), s.train_idx.begin(), s.train_idx.end());
    all.insert(all.end(), s.eval_idx.begin(), s.eval_idx.end());
  }
  std::sort(all.begin(), all.end());
  ASSERT_EQ(all.size(), n);
  for (std::size_t i = 0; i < n; ++i) ASSERT_EQ(all[i], i);
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  out.write(b, 4);
}

void write_idx(const std::filesystem::path& img, const std::filesystem::path& lab, std::uint32_t n,
               std::uint32_t rows, std::uint32_t cols, std::uint32_t img_magic = kIdxImageMagic,
               std::uint32_t lab_count = 0, std::size_t truncate_pixels = 0) {
  std::ofstream a(img, std::ios::binary);
  put_be32(a, img_magic);
  put_be32(a, n);
  put_be32(a, rows);
  put_be32(a, cols);
  std::vector<char> px(std::size_t(n) * rows * cols - truncate_pixels);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = char(i % 256);
  a.write(px.data(), std::streamsize(px.size()));
  std::ofstream b(lab, std::ios::binary);
  put_be32(b, kIdxLabelMagic);
  put_be32(b, lab_count ? lab_count : n);
  for (std::uint32_t i = 0; i < n; ++i) b.put(char(i % 10));
}

}  // namespace

TEST(SyntheticBlobs, BalancedAndDeterministic) {
  const auto a = make_synthetic_blobs(3, 5, 100, 1.0, 42);
  EXPECT_EQ(a.size(), 300u);
  for (int c = 0; c < 3; ++c) EXPECT_EQ(std::count(a.labels.begin(), a.labels.end(), c), 100);
  const auto b = make_synthetic_blobs(3, 5, 100, 1.0, 42);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
}

TEST(SyntheticBlobs, ZeroSpreadCollapsesClasses) {
  const auto ds = make_synthetic_blobs(4, 6, 10, 0.0, 1);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::size_t first = std::size_t(ds.labels[i]) * 10;
    EXPECT_EQ(ds.features.row(Eigen::Index(i)), ds.features.row(Eigen::Index(first)));
    EXPECT_NEAR(ds.features.row(Eigen::Index(i)).norm(), 3.0, 1e-12);
  }
  // Nearest-centre classification is perfect when there is no noise.
  for (std::size_t i = 0; i < ds.size(); ++i) {
    int best = 0;
    double best_d = 1e300;
    for (int c = 0; c < 4; ++c) {
      const double d = (ds.features.row(Eigen::Index(i)) - ds.features.row(Eigen::Index(c) * 10)).norm();
      if (d < best_d) best_d = d, best = c;
    }
    EXPECT_EQ(best, ds.labels[i]);
  }
}

TEST(LoadIdx, ParsesHeadersAndScalesPixels) {
  const auto dir = scratch::scratch_dir();
  write_idx(dir / "img", dir / "lab", 300, 4, 3);
  const auto ds = load_idx(dir / "img", dir / "lab");
  EXPECT_EQ(ds.size(), 300u);
  EXPECT_EQ(ds.dim(), 12);
  EXPECT_EQ(ds.num_classes, 10);
  EXPECT_EQ(ds.features(0, 1), 1.0 / 255.0);
  EXPECT_EQ(ds.features(21, 3), 1.0);  // byte 255 = row 21, col 3
  EXPECT_EQ(ds.labels[13], 3);
}

TEST(LoadIdx, FashionMnistSizedFiles) {
  // 16-byte header + 60000 * 28 * 28 bytes, the published train-images size.
  const auto dir = scratch::scratch_dir();
  write_idx(dir / "img", dir / "lab", 60000, 28, 28);
  EXPECT_EQ(std::filesystem::file_size(dir / "img"), 47040016u);
  EXPECT_EQ(std::filesystem::file_size(dir / "lab"), 60008u);
  const auto ds = load_idx(dir / "img", dir / "lab");
  EXPECT_EQ(ds.size(), 60000u);
  EXPECT_EQ(ds.dim(), 784);
  EXPECT_EQ(ds.num_classes, 10);
}

TEST(LoadIdx, Errors) {
  const auto dir = scratch::scratch_dir();
  auto expect_error = [&](const std::string& needle) {
    try {
      load_idx(dir / "img", dir / "lab");
      FAIL() << "expected LoadError containing " << needle;
    } catch (const LoadError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  write_idx(dir / "img", dir / "lab", 10, 2, 2, kIdxLabelMagic);
  expect_error("bad image magic");
  write_idx(dir / "img", dir / "lab", 10, 2, 2, kIdxImageMagic, 9);
  expect_error("count mismatch");
  write_idx(dir / "img", dir / "lab", 10, 2, 2, kIdxImageMagic, 0, 5);
  expect_error("truncated image data");
  EXPECT_THROW(load_idx(dir / "missing", dir / "lab"), LoadError);
}

TEST(PartitionIid, RoundRobinSizes) {
  const auto ds = make_synthetic_blobs(2, 2, 5, 1.0, 0);
  const auto shards = partition_iid(ds, 3, 9);
  std::vector<std::size_t> sizes;
  for (const auto& s : shards) sizes.push_back(s.train_idx.size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{4, 3, 3}));
  expect_exact_partition(shards, 10);
  const auto one = partition_iid(ds, 1, 9);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].train_idx.size(), 10u);
  EXPECT_THROW(partition_iid(ds, 11, 9), ConfigError);
}

TEST(PartitionDirichlet, ExactPartitionAndDeterminism) {
  const auto ds = make_synthetic_blobs(10, 4, 100, 1.0, 0);
  const auto a = partition_dirichlet(ds, 10, 0.1, 8, 77);
  expect_exact_partition(a, ds.size());
  for (const auto& s : a) EXPECT_GE(s.train_idx.size(), 8u);
  const auto b = partition_dirichlet(ds, 10, 0.1, 8, 77);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].train_idx, b[i].train_idx);
}

TEST(PartitionDirichlet, LargeAlphaApproachesUniformShares) {
  const auto ds = make_synthetic_blobs(10, 2, 1000, 1.0, 0);
  const int clients = 10;
  const auto shards = partition_dirichlet(ds, clients, 1e6, 8, 3);
  double worst = 0.0;
  for (const auto& s : shards) {
    const auto h = class_histogram(ds, s.train_idx);
    for (std::size_t c = 0; c < h.size(); ++c) worst = std::max(worst, std::abs(double(h[c]) / 1000.0 - 1.0 / clients));
  }
  EXPECT_LT(worst, 0.05);
}

TEST(PartitionDirichlet, SmallAlphaLowersClassEntropy) {
  const auto ds = make_synthetic_blobs(10, 2, 1000, 1.0, 0);
  const auto skewed = partition_dirichlet(ds, 20, 0.1, 8, 5);
  const auto iid = partition_iid(ds, 20, 5);
  expect_exact_partition(skewed, ds.size());
  EXPECT_LT(mean_shard_entropy(ds, skewed), mean_shard_entropy(ds, iid));
}

TEST(PartitionDirichlet, ExhaustedRejectionIsConfigError) {
  const auto ds = make_synthetic_blobs(2, 2, 10, 1.0, 0);
  EXPECT_THROW(partition_dirichlet(ds, 4, 0.1, 6, 1), ConfigError);
  EXPECT_THROW(partition_dirichlet(ds, 4, 0.0, 1, 1), ConfigError);
}

TEST(SplitTrainEval, Proportions) {
  ClientShard s;
  s.client_id = 2;
  s.train_idx = {3, 5, 7, 9, 11, 13, 15, 17};
  const auto split = split_train_eval(s, 0.75, 1);
  EXPECT_EQ(split.train_idx.size(), 6u);
  EXPECT_EQ(split.eval_idx.size(), 2u);
  std::vector<std::size_t> all = split.train_idx;
  all.insert(all.end(), split.eval_idx.begin(), split.eval_idx.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, s.train_idx);

  s.train_idx.resize(100);
  std::iota(s.train_idx.begin(), s.train_idx.end(), std::size_t{0});
  const auto big = split_train_eval(s, 0.75, 1);
  EXPECT_EQ(big.train_idx.size(), 75u);
  EXPECT_EQ(big.eval_idx.size(), 25u);
}

TEST(SplitTrainEval, TooSmall) {
  ClientShard s;
  s.train_idx = {1};
  EXPECT_THROW(split_train_eval(s, 0.75, 0), ConfigError);
  s.train_idx = {1, 2};
  EXPECT_THROW(split_train_eval(s, 0.75, 0), ConfigError);  // ceil(1.5) leaves no eval
  s.train_idx = {1, 2, 3, 4};
  EXPECT_THROW(split_train_eval(s, 1.0, 0), ConfigError);
}

TEST(GlobalTest, UnionOfEvalSplits) {
  std::vector<ClientShard> shards(2);
  shards[0].eval_idx = {1, 2};
  shards[1].eval_idx = {3};
  EXPECT_EQ(build_global_test(shards), (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(build_global_test(std::span(shards).first(1)), (std::vector<std::size_t>{1, 2}));
}

TEST(GlobalTest, NeverContainsTrainingIndices) {
  const auto ds = make_synthetic_blobs(10, 2, 50, 1.0, 0);
  auto shards = partition_dirichlet(ds, 6, 0.5, 8, 2);
  for (auto& s : shards) s = split_train_eval(s, 0.75, 4);
  const auto test = build_global_test(shards);
  std::size_t eval_total = 0;
  for (const auto& s : shards) {
    eval_total += s.eval_idx.size();
    for (std::size_t i : s.train_idx) EXPECT_FALSE(std::binary_search(test.begin(), test.end(), i));
  }
  EXPECT_EQ(test.size(), eval_total);
  expect_exact_partition(shards, ds.size());
}

TEST(DatasetCsv, HeaderAndRows) {
  const auto ds = make_synthetic_blobs(2, 3, 2, 0.5, 0);
  std::ostringstream os;
  write_dataset_csv(ds, os);
  const std::string text = os.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "label,f0,f1,f2");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 5);
}
