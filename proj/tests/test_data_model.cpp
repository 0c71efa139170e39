#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "adatrans/data_model.hpp"
#include "adatrans/synth_gen.hpp"

using namespace adatrans;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("adatrans_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

MultiSourceDataset small_synthetic(int n_target, int n_source, std::uint64_t seed) {
  SynthParams params = SynthParams::defaults(seed);
  params.n_per_pop = n_source;
  DiscrepancySpec spec;
  spec.deltas = {1.0};
  return make_multisource(params, PopVectors::default_target(), spec, seed, n_target);
}

}  // namespace

TEST_CASE("load_dataset round-trips a generated dataset bitwise") {
  const auto dir = temp_dir("roundtrip");
  const MultiSourceDataset data = small_synthetic(50, 60, 11);
  save_dataset(data, dir.string());
  const MultiSourceDataset back = load_dataset((dir / "manifest.txt").string());

  REQUIRE(back.m() == 1);
  REQUIRE(back.d_x() == 30);
  CHECK(back.target.pop_id == "t");
  CHECK(back.target.x == data.target.x);
  CHECK(back.target.w == data.target.w);
  CHECK(back.target.y == data.target.y);
  CHECK(*back.target.y0_true == *data.target.y0_true);
  CHECK(*back.target.y1_true == *data.target.y1_true);
  CHECK(back.sources[0].y == data.sources[0].y);

  // save the reloaded dataset again: identical files
  const auto dir2 = temp_dir("roundtrip2");
  save_dataset(back, dir2.string());
  std::ifstream f1(dir / "t.csv"), f2(dir2 / "t.csv");
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
}

TEST_CASE("load_dataset rejects bad values") {
  const auto dir = temp_dir("badvalues");
  {
    std::ofstream mf(dir / "manifest.txt");
    mf << "target = t\noutcome = continuous\nproxy_types = b*2\npop.t = t.csv\n";
    std::ofstream csv(dir / "t.csv");
    csv << "x0,x1,w,y\n0,1,2,0.5\n";  // w = 2
  }
  CHECK_THROWS_AS(load_dataset((dir / "manifest.txt").string()), ValueError);
}

TEST_CASE("load_dataset rejects an empty population") {
  const auto dir = temp_dir("empty");
  {
    std::ofstream mf(dir / "manifest.txt");
    mf << "target = t\noutcome = continuous\nproxy_types = b*2\npop.t = t.csv\npop.s = s.csv\n";
    std::ofstream csv(dir / "t.csv");
    csv << "x0,x1,w,y\n0,1,1,0.5\n";
    std::ofstream scsv(dir / "s.csv");
    scsv << "x0,x1,w,y\n";
  }
  CHECK_THROWS_AS(load_dataset((dir / "manifest.txt").string()), EmptyPopulation);
}

TEST_CASE("load_dataset rejects a schema mismatch") {
  const auto dir = temp_dir("schema");
  {
    std::ofstream mf(dir / "manifest.txt");
    mf << "target = t\noutcome = continuous\nproxy_types = b*3\npop.t = t.csv\n";
    std::ofstream csv(dir / "t.csv");
    csv << "x0,x1,w,y\n0,1,1,0.5\n";
  }
  CHECK_THROWS_AS(load_dataset((dir / "manifest.txt").string()), SchemaMismatch);
}

TEST_CASE("split_target honors sizes, determinism and disjointness") {
  const MultiSourceDataset data = small_synthetic(1000, 40, 3);
  const TargetSplit s = split_target(data, {50, 100, 850, 7});
  CHECK(s.train.target.n() == 50);
  CHECK(s.val.target.n() == 100);
  CHECK(s.test.target.n() == 850);
  CHECK(s.train.m() == 1);
  CHECK(s.val.m() == 0);
  CHECK(s.test.m() == 0);

  const TargetSplit s2 = split_target(data, {50, 100, 850, 7});
  CHECK(s.train.target.y == s2.train.target.y);

  const TargetSplit s3 = split_target(data, {50, 100, 850, 8});
  CHECK(s.train.target.y != s3.train.target.y);

  // disjoint cover: total y mass matches
  const double total = s.train.target.y.sum() + s.val.target.y.sum() + s.test.target.y.sum();
  CHECK(total == doctest::Approx(data.target.y.sum()).epsilon(1e-12));
}

TEST_CASE("split_target boundary and error cases") {
  const MultiSourceDataset data = small_synthetic(10, 5, 3);
  const TargetSplit s = split_target(data, {0, 0, 10, 1});
  CHECK(s.train.target.n() == 0);
  CHECK(s.val.target.n() == 0);
  CHECK(s.test.target.n() == 10);
  CHECK_THROWS_AS(split_target(data, {6, 6, 0, 1}), SplitTooLarge);
}

TEST_CASE("validate flags injected defects with coordinates") {
  MultiSourceDataset data = small_synthetic(20, 20, 5);
  CHECK(validate(data).ok());

  MultiSourceDataset bad = data;
  bad.target.y(3) = std::numeric_limits<double>::quiet_NaN();
  const ValidationReport rep = validate(bad);
  REQUIRE(rep.findings.size() == 1);
  CHECK(rep.findings[0].kind == "NonFinite");
  CHECK(rep.findings[0].row == 3);

  MultiSourceDataset dim = data;
  dim.sources[0].x.conservativeResize(dim.sources[0].n(), 29);
  bool saw_dim = false;
  for (const auto& f : validate(dim).findings) saw_dim |= f.kind == "DimMismatch";
  CHECK(saw_dim);
}

TEST_CASE("validate checks the potential-outcome identity on generator output") {
  MultiSourceDataset data = small_synthetic(20, 20, 5);
  MultiSourceDataset bad = data;
  bad.target.y(0) = bad.target.y(0) + 1.0;
  bool saw = false;
  for (const auto& f : validate(bad).findings) saw |= f.kind == "OutcomeIdentity";
  CHECK(saw);
}
