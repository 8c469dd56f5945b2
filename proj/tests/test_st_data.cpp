#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "triplex/st_data.hpp"

using namespace triplex;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("triplex_test_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string file(const std::string& name, const std::string& content) const {
    const std::string p = (path / name).string();
    std::ofstream out(p, std::ios::binary);
    out << content;
    return p;
  }
};

}  // namespace

TEST_CASE("load_dataset joins spots to counts and min-shifts coordinates") {
  TempDir dir;
  auto spots = dir.file("spots.csv",
                        "slide_id,patient_id,spot_id,grid_x,grid_y,pixel_x,pixel_y\n"
                        "A,p1,a1,2,3,100,100\n"
                        "A,p1,a2,2,4,100,324\n"
                        "A,p1,a3,3,3,324,100\n"
                        "B,p2,b1,0,0,100,100\n"
                        "B,p2,b2,0,1,100,324\n"
                        "B,p2,b3,1,0,324,100\n");
  auto counts = dir.file("counts.csv",
                         "spot_id,g1,g2,g3,g4,g5\n"
                         "a1,1,2,3,4,5\n"
                         "a2,0,0,0,0,1\n"
                         "a3,5,5,5,5,5\n"
                         "b1,1,1,1,1,1\n"
                         "b2,2,2,2,2,2\n"
                         "b3,3,3,3,3,3\n");
  auto datasets = load_dataset(spots, counts);
  REQUIRE(datasets.size() == 2);
  CHECK(datasets[0].n() == 3);
  CHECK(datasets[0].m() == 5);
  CHECK(datasets[1].n() == 3);
  // slide A coordinates {(2,3),(2,4),(3,3)} shift to {(0,0),(0,1),(1,0)}
  CHECK(datasets[0].spots[0].grid_x == 0);
  CHECK(datasets[0].spots[0].grid_y == 0);
  CHECK(datasets[0].spots[1].grid_y == 1);
  CHECK(datasets[0].spots[2].grid_x == 1);
  CHECK(datasets[0].patient_id == "p1");
}

TEST_CASE("load_dataset rejects malformed rows with the line number") {
  TempDir dir;
  auto spots = dir.file("spots.csv",
                        "slide_id,patient_id,spot_id,grid_x,grid_y,pixel_x,pixel_y\n"
                        "A,p1,a1,0,0,100,100\n");
  auto counts = dir.file("counts.csv",
                         "spot_id,g1,g2,g3,g4,g5\n"
                         "a1,1,2,3,4\n");
  CHECK_THROWS_WITH_AS(load_dataset(spots, counts), doctest::Contains("line 2"), ParseError);
}

TEST_CASE("load_dataset reports ids missing from either side") {
  TempDir dir;
  auto spots = dir.file("spots.csv",
                        "slide_id,patient_id,spot_id,grid_x,grid_y,pixel_x,pixel_y\n"
                        "A,p1,a1,0,0,100,100\n"
                        "A,p1,a2,0,1,100,324\n");
  auto counts = dir.file("counts.csv",
                         "spot_id,g1\n"
                         "a1,1\n"
                         "zz,5\n");
  try {
    load_dataset(spots, counts);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("a2") != std::string::npos);
    CHECK(msg.find("zz") != std::string::npos);
  }
}

TEST_CASE("load_dataset rejects duplicate grid cells") {
  TempDir dir;
  auto spots = dir.file("spots.csv",
                        "slide_id,patient_id,spot_id,grid_x,grid_y,pixel_x,pixel_y\n"
                        "A,p1,a1,1,1,100,100\n"
                        "A,p1,a2,1,1,100,324\n");
  auto counts = dir.file("counts.csv", "spot_id,g1\na1,1\na2,2\n");
  CHECK_THROWS_WITH_AS(load_dataset(spots, counts), doctest::Contains("duplicate grid cell"),
                       ParseError);
}

TEST_CASE("select_genes ranks by mean count with lexical tie-break") {
  SlideDataset ds;
  ds.slide_id = "S";
  ds.patient_id = "P";
  ds.gene_names = {"g0", "g1", "g2"};
  SpotRecord sp;
  sp.spot_id = "s";
  sp.expression = {5, 1, 9};
  ds.spots.push_back(sp);

  auto top2 = select_genes({ds}, 2);
  CHECK(top2 == std::vector<int64_t>{2, 0});
  auto all = select_genes({ds}, 3);
  CHECK(all == std::vector<int64_t>{2, 0, 1});

  // equal means: lexically smaller name first
  SlideDataset tie = ds;
  tie.gene_names = {"zz", "aa", "mm"};
  tie.spots[0].expression = {4, 4, 9};
  auto ranked = select_genes({tie}, 3);
  CHECK(ranked == std::vector<int64_t>{2, 1, 0});

  CHECK_THROWS_AS(select_genes({ds}, 0), ValueError);
  CHECK_THROWS_AS(select_genes({ds}, 4), ValueError);
}

TEST_CASE("normalize_expression applies log(1 + c/T) and drops empty spots") {
  SlideDataset ds;
  ds.slide_id = "S";
  ds.patient_id = "P";
  ds.gene_names = {"a", "b", "c"};
  SpotRecord sp;
  sp.spot_id = "s1";
  sp.expression = {2, 3, 5};
  ds.spots.push_back(sp);
  SpotRecord zero;
  zero.spot_id = "s2";
  zero.grid_x = 1;
  zero.expression = {0, 0, 0};
  ds.spots.push_back(zero);

  auto res = normalize_expression(ds);
  REQUIRE(res.dataset.n() == 1);
  REQUIRE(res.dropped_spots == std::vector<std::string>{"s2"});
  CHECK(res.dataset.spots[0].expression[0] == doctest::Approx(std::log(1.2)).epsilon(1e-12));
  CHECK(res.dataset.spots[0].expression[1] == doctest::Approx(std::log(1.3)).epsilon(1e-12));
  CHECK(res.dataset.spots[0].expression[2] == doctest::Approx(std::log(1.5)).epsilon(1e-12));

  // an all-zero gene in a surviving spot maps to log(1+0) = 0
  SlideDataset ds2 = ds;
  ds2.spots.resize(1);
  ds2.spots[0].expression = {0, 3, 5};
  auto res2 = normalize_expression(ds2);
  CHECK(res2.dataset.spots[0].expression[0] == 0.0);

  // the stage tag forbids normalizing twice
  CHECK_THROWS_AS(normalize_expression(res.dataset), ValueError);
}

TEST_CASE("smooth_expression averages over the existing neighborhood") {
  SlideDataset lone;
  lone.slide_id = "S";
  lone.patient_id = "P";
  lone.gene_names = {"a"};
  lone.stage = ProcessingStage::normalized;
  SpotRecord sp;
  sp.spot_id = "s";
  sp.expression = {7.0};
  lone.spots.push_back(sp);
  CHECK(smooth_expression(lone).spots[0].expression[0] == 7.0);  // isolated: unchanged

  SlideDataset pair = lone;
  pair.spots[0].expression = {2.0};
  SpotRecord nb;
  nb.spot_id = "t";
  nb.grid_x = 0;
  nb.grid_y = 1;
  nb.expression = {4.0};
  pair.spots.push_back(nb);
  auto sm = smooth_expression(pair);
  CHECK(sm.spots[0].expression[0] == doctest::Approx(3.0));  // two-point mean
  CHECK(sm.spots[1].expression[0] == doctest::Approx(3.0));

  // full 3x3 block: center equals the brute-force mean of all nine values
  SlideDataset block;
  block.slide_id = "S";
  block.patient_id = "P";
  block.gene_names = {"a"};
  block.stage = ProcessingStage::normalized;
  Rng rng(11);
  double total = 0;
  for (int x = 0; x < 3; ++x)
    for (int y = 0; y < 3; ++y) {
      SpotRecord s;
      s.spot_id = "s" + std::to_string(x) + std::to_string(y);
      s.grid_x = x;
      s.grid_y = y;
      s.expression = {rng.normal()};
      total += s.expression[0];
      block.spots.push_back(s);
    }
  auto smoothed = smooth_expression(block);
  CHECK(smoothed.spots[4].expression[0] == doctest::Approx(total / 9.0).epsilon(1e-12));

  // 4-neighborhood: center of the plus shape averages five values
  auto smoothed4 = smooth_expression(block, 4);
  double plus = (block.spots[4].expression[0] + block.spots[1].expression[0] +
                 block.spots[3].expression[0] + block.spots[5].expression[0] +
                 block.spots[7].expression[0]) /
                5.0;
  CHECK(smoothed4.spots[4].expression[0] == doctest::Approx(plus).epsilon(1e-12));

  CHECK_THROWS_AS(smooth_expression(smoothed), ValueError);  // once only
}

TEST_CASE("target patch extraction matches direct indexing and pads with zeros") {
  ImageU8 slide(448, 448);
  for (int64_t y = 0; y < 448; ++y)
    for (int64_t x = 0; x < 448; ++x) {
      slide.at(y, x, 0) = static_cast<uint8_t>(x % 256);
      slide.at(y, x, 1) = static_cast<uint8_t>(y % 256);
      slide.at(y, x, 2) = static_cast<uint8_t>((x + y) % 256);
    }

  ImageU8 patch = extract_target_patch(slide, 224, 224);
  REQUIRE(patch.h == 224);
  REQUIRE(patch.w == 224);
  for (int64_t y = 0; y < 224; y += 17)
    for (int64_t x = 0; x < 224; x += 13)
      for (int c = 0; c < 3; ++c) CHECK(patch.at(y, x, c) == slide.at(y + 112, x + 112, c));

  // center at (0,0): the window starts at (-112,-112), three quadrants zero
  ImageU8 corner = extract_target_patch(slide, 0, 0);
  for (int64_t y = 0; y < 112; ++y)
    for (int64_t x = 0; x < 224; x += 37) CHECK(corner.at(y, x, 0) == 0);
  for (int64_t y = 112; y < 224; y += 37)
    for (int64_t x = 0; x < 112; x += 37) CHECK(corner.at(y, x, 1) == 0);
  CHECK(corner.at(112, 112, 0) == slide.at(0, 0, 0));
  CHECK(corner.at(223, 223, 1) == slide.at(111, 111, 1));
}

TEST_CASE("patch extraction is translation-consistent") {
  Rng rng(12);
  ImageU8 small(300, 300);
  for (auto& b : small.data) b = static_cast<uint8_t>(rng.uniform_int(0, 255));
  ImageU8 shifted(340, 325);
  const int64_t dy = 40, dx = 25;
  for (int64_t y = 0; y < 300; ++y)
    for (int64_t x = 0; x < 300; ++x)
      for (int c = 0; c < 3; ++c) shifted.at(y + dy, x + dx, c) = small.at(y, x, c);
  ImageU8 a = extract_target_patch(small, 150, 150);
  ImageU8 b = extract_target_patch(shifted, 150 + dx, 150 + dy);
  CHECK(a.data == b.data);
}

TEST_CASE("neighbor view tiles the 5x window row-major with tile 12 on target") {
  ImageU8 slide(1400, 1400);
  Rng rng(13);
  for (auto& b : slide.data) b = static_cast<uint8_t>(rng.uniform_int(0, 255));
  const int64_t cx = 700, cy = 700;
  auto tiles = extract_neighbor_view(slide, cx, cy);
  REQUIRE(tiles.size() == 25);
  // tile (0,0) upper-left pixel is slide pixel (cx-560, cy-560)
  CHECK(tiles[0].at(0, 0, 0) == slide.at(cy - 560, cx - 560, 0));
  // row-major: tile (1,2) upper-left
  CHECK(tiles[1 * 5 + 2].at(0, 0, 2) == slide.at(cy - 560 + 224, cx - 560 + 448, 2));
  // the center tile coincides with the target patch
  ImageU8 target = extract_target_patch(slide, cx, cy);
  CHECK(tiles[12].data == target.data);

  // corner spot: at least 15 tiles fall fully outside and are all-zero
  auto corner_tiles = extract_neighbor_view(slide, 0, 0);
  int zero_tiles = 0;
  for (const auto& t : corner_tiles) {
    bool all_zero = true;
    for (uint8_t v : t.data)
      if (v != 0) {
        all_zero = false;
        break;
      }
    zero_tiles += all_zero;
  }
  CHECK(zero_tiles >= 15);
}

TEST_CASE("toy extractor honors the output contract") {
  auto extractor = make_toy_extractor(7);
  Tensor<float> constant = Tensor<float>::full({3, 224, 224}, 0.5f);
  Tensor<float> tokens, pooled;
  extractor->extract(constant, tokens, pooled);
  REQUIRE(tokens.shape() == std::vector<int64_t>{49, 512});
  REQUIRE(pooled.shape() == std::vector<int64_t>{512});
  // constant input: interior tokens identical once away from the padded border
  const float* t = tokens.data();
  for (int64_t j = 0; j < 512; j += 41)
    CHECK(t[(3 * 7 + 3) * 512 + j] == doctest::Approx(t[(3 * 7 + 2) * 512 + j]).epsilon(1e-5));
  // deterministic for a fixed seed
  auto extractor2 = make_toy_extractor(7);
  Tensor<float> tokens2, pooled2;
  extractor2->extract(constant, tokens2, pooled2);
  for (int64_t i = 0; i < tokens.numel(); i += 997) CHECK(tokens.data()[i] == tokens2.data()[i]);
}

TEST_CASE("extract_features is per-spot independent and file IO round-trips") {
  SlideDataset ds;
  ds.slide_id = "S";
  ds.patient_id = "P";
  ds.gene_names = {"a"};
  for (int i = 0; i < 2; ++i) {
    SpotRecord sp;
    sp.spot_id = "s" + std::to_string(i);
    sp.grid_x = 0;
    sp.grid_y = i;
    sp.pixel_x = 120 + i * 90;
    sp.pixel_y = 140;
    sp.expression = {1.0};
    ds.spots.push_back(sp);
  }
  ImageU8 slide(320, 320);
  Rng rng(14);
  for (auto& b : slide.data) b = static_cast<uint8_t>(rng.uniform_int(0, 255));

  auto extractor = make_toy_extractor(7);
  FeatureSet fs = extract_features(*extractor, ds, slide);
  fs.validate(2);

  // permuting the spots permutes the feature rows identically
  SlideDataset swapped = ds;
  std::swap(swapped.spots[0], swapped.spots[1]);
  FeatureSet fs2 = extract_features(*extractor, swapped, slide);
  for (int64_t j = 0; j < 49 * 512; j += 331) {
    CHECK(fs.target.data()[j] == fs2.target.data()[49 * 512 + j]);
    CHECK(fs.target.data()[49 * 512 + j] == fs2.target.data()[j]);
  }

  TempDir dir;
  const std::string path = (dir.path / "t.bin").string();
  write_feature_file(path, fs.target);
  Tensor<float> back = read_feature_file(path);
  REQUIRE(back.shape() == fs.target.shape());
  for (int64_t i = 0; i < back.numel(); ++i) REQUIRE(back.data()[i] == fs.target.data()[i]);

  write_feature_file(path, fs.global);  // (n, dim) stored with tokens == 1
  Tensor<float> gback = read_feature_file(path);
  REQUIRE(gback.shape() == fs.global.shape());
}

TEST_CASE("ppm and raw planar images round-trip") {
  TempDir dir;
  ImageU8 img(5, 4);
  Rng rng(15);
  for (auto& b : img.data) b = static_cast<uint8_t>(rng.uniform_int(0, 255));
  const std::string p = (dir.path / "x.ppm").string();
  write_ppm(p, img);
  ImageU8 back = read_ppm(p);
  CHECK(back.h == 5);
  CHECK(back.w == 4);
  CHECK(back.data == img.data);

  std::vector<uint8_t> planes(5 * 4 * 3);
  for (int64_t y = 0; y < 5; ++y)
    for (int64_t x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) planes[static_cast<size_t>(c * 20 + y * 4 + x)] = img.at(y, x, c);
  const std::string rp = (dir.path / "x.raw").string();
  std::ofstream(rp, std::ios::binary)
      .write(reinterpret_cast<const char*>(planes.data()), static_cast<std::streamsize>(planes.size()));
  ImageU8 rback = read_raw_planar(rp, 5, 4);
  CHECK(rback.data == img.data);
}
