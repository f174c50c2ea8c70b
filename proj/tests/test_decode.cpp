#include <doctest.h>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <tuple>

#include "cornerdet/data.hpp"
#include "cornerdet/decode.hpp"
#include "cornerdet/targets.hpp"
#include "oracles.hpp"

using namespace cornerdet;

namespace {

CornerMaps empty_maps(std::size_t c, std::size_t h, std::size_t w) {
  return CornerMaps{Tensor<float>({c, h, w}), Tensor<float>({1, h, w}), Tensor<float>({2, h, w})};
}

// Ground-truth maps with a distinct embedding per object at both of its corners.
std::pair<CornerMaps, CornerMaps> maps_from_targets(const TargetMaps& t) {
  const std::size_t h = t.tl_heat.dim(1), w = t.tl_heat.dim(2);
  CornerMaps tl{t.tl_heat, Tensor<float>({1, h, w}), t.tl_off};
  CornerMaps br{t.br_heat, Tensor<float>({1, h, w}), t.br_off};
  for (std::size_t k = 0; k < t.corners.size(); ++k) {
    const auto& c = t.corners[k];
    tl.emb.at(0, c.tl_y, c.tl_x) = 10.0f * static_cast<float>(k + 1);
    br.emb.at(0, c.br_y, c.br_x) = 10.0f * static_cast<float>(k + 1);
  }
  return {tl, br};
}

Detection det(float score, Box b, int cls = 0) { return Detection{cls, score, b}; }

}  // namespace

TEST_CASE("heat nms") {
  SUBCASE("ramp keeps only its peak") {
    Tensor<float> ramp({1, 1, 5}, std::vector<float>{0.1f, 0.2f, 0.3f, 0.4f, 0.5f});
    CHECK(heat_nms(ramp) == Tensor<float>({1, 1, 5}, std::vector<float>{0, 0, 0, 0, 0.5f}));
  }
  SUBCASE("constant map survives") {
    Tensor<float> c({2, 4, 4}, 0.3f);
    CHECK(heat_nms(c) == c);
  }
  SUBCASE("isolated peak") {
    Tensor<float> m({1, 5, 5});
    m.at(0, 2, 3) = 0.7f;
    CHECK(heat_nms(m) == m);
  }
  SUBCASE("never increases, survivors unchanged, idempotent") {
    std::mt19937_64 rng(61);
    std::uniform_real_distribution<float> u(0, 1);
    for (int trial = 0; trial < 30; ++trial) {
      Tensor<float> m({2, 7, 9});
      for (auto& v : m.data()) v = std::round(u(rng) * 8) / 8;  // ties are common
      const auto out = heat_nms(m);
      for (std::size_t i = 0; i < m.numel(); ++i) {
        CHECK(out[i] <= m[i]);
        CHECK((out[i] == m[i] || out[i] == 0.0f));
      }
      CHECK(heat_nms(out) == out);
      const auto pooled = oracle::window_max(m);
      for (std::size_t i = 0; i < m.numel(); ++i) CHECK((out[i] != 0.0f) == (m[i] != 0.0f && m[i] == pooled[i]));
    }
  }
}

TEST_CASE("top corners") {
  SUBCASE("zero map still yields k corners") {
    const auto c = top_corners(Tensor<float>({2, 4, 4}), 5);
    REQUIRE(c.size() == 5);
    for (const auto& k : c) CHECK(k.score == 0.0f);
    CHECK(c[0] == Corner{0, 0, 0, 0.0f});
    CHECK(c[4] == Corner{0, 1, 0, 0.0f});
  }
  SUBCASE("hot cell ranks first") {
    Tensor<float> m({3, 4, 4}, 0.1f);
    m.at(2, 3, 1) = 0.9f;
    CHECK(top_corners(m, 1).front() == Corner{2, 3, 1, 0.9f});
  }
  SUBCASE("matches a sort oracle") {
    std::mt19937_64 rng(67);
    std::uniform_int_distribution<int> u(0, 5);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor<float> m({2, 5, 6});
      for (auto& v : m.data()) v = static_cast<float>(u(rng)) / 5.0f;
      std::vector<std::tuple<float, int, int, int>> keys;
      for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 5; ++y)
          for (int x = 0; x < 6; ++x) keys.emplace_back(-m.at(c, y, x), c, y, x);
      std::sort(keys.begin(), keys.end());
      const auto got = top_corners(m, 17);
      REQUIRE(got.size() == 17);
      for (std::size_t i = 0; i < got.size(); ++i) {
        const auto& [s, c, y, x] = keys[i];
        CHECK(got[i] == Corner{c, y, x, -s});
      }
    }
    CHECK(top_corners(Tensor<float>({1, 2, 2}), 100).size() == 4);
    CHECK_THROWS_AS(top_corners(Tensor<float>({1, 2, 2}), 0), std::invalid_argument);
  }
}

TEST_CASE("pairing fixture") {
  auto tl = empty_maps(1, 16, 16), br = empty_maps(1, 16, 16);
  tl.emb.at(0, 3, 2) = 0.5f;
  tl.off.at(0, 3, 2) = 0.25f;
  br.emb.at(0, 12, 10) = 0.6f;
  const DecodeConfig cfg;
  const std::vector<Corner> tls{{0, 3, 2, 0.9f}}, brs{{0, 12, 10, 0.8f}};
  const auto d = pair_and_score(tls, brs, tl, br, cfg);
  REQUIRE(d.size() == 1);
  CHECK(d[0].box == Box{9.0, 12.0, 40.0, 48.0});
  CHECK(d[0].score == doctest::Approx(0.85));

  SUBCASE("embedding distance too large") {
    tl.emb.at(0, 3, 2) = 0.0f;
    br.emb.at(0, 12, 10) = 0.9f;
    CHECK(pair_and_score(tls, brs, tl, br, cfg).empty());
  }
  SUBCASE("class mismatch") {
    auto tl2 = empty_maps(2, 16, 16), br2 = empty_maps(2, 16, 16);
    CHECK(pair_and_score({{0, 3, 2, 0.9f}}, {{1, 12, 10, 0.8f}}, tl2, br2, cfg).empty());
  }
  SUBCASE("bottom-right above-left of top-left") {
    CHECK(pair_and_score({{0, 12, 10, 0.9f}}, {{0, 3, 2, 0.8f}}, tl, br, cfg).empty());
    // weakly below-right: same cell is allowed
    CHECK(pair_and_score({{0, 5, 5, 0.9f}}, {{0, 5, 5, 0.8f}}, tl, br, cfg).size() == 1);
  }
}

TEST_CASE("soft nms") {
  SUBCASE("identical boxes") {
    const auto out = soft_nms({det(0.9f, {0, 0, 10, 10}), det(0.8f, {0, 0, 10, 10})}, 0.5, 100);
    REQUIRE(out.size() == 2);
    CHECK(out[0].score == doctest::Approx(0.9));
    CHECK(out[1].score == doctest::Approx(0.10827).epsilon(1e-4));
  }
  SUBCASE("disjoint boxes keep their scores") {
    const auto out = soft_nms({det(0.9f, {0, 0, 10, 10}), det(0.8f, {20, 20, 30, 30})}, 0.5, 100);
    CHECK(out[1].score == 0.8f);
  }
  SUBCASE("single detection") {
    const auto out = soft_nms({det(0.4f, {1, 2, 3, 4})}, 0.5, 100);
    REQUIRE(out.size() == 1);
    CHECK(out[0].score == 0.4f);
  }
  SUBCASE("scores never increase and length is capped") {
    std::mt19937_64 rng(71);
    std::uniform_real_distribution<double> pos(0, 40), ext(2, 20), sc(0, 1);
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<Detection> in;
      for (int i = 0; i < 25; ++i) {
        const double x = pos(rng), y = pos(rng);
        in.push_back(det(static_cast<float>(sc(rng)), {x, y, x + ext(rng), y + ext(rng)}));
      }
      std::sort(in.begin(), in.end(), [](auto& a, auto& b) { return a.score > b.score; });
      const auto out = soft_nms(in, 0.5, 10);
      CHECK(out.size() == 10);
      for (std::size_t i = 0; i < out.size(); ++i) {
        const auto src = std::find_if(in.begin(), in.end(), [&](const Detection& d) { return d.box == out[i].box; });
        REQUIRE(src != in.end());
        CHECK(out[i].score <= src->score);
        if (i > 0) CHECK(out[i].score <= out[i - 1].score);
      }
      // the cap only truncates: same leading entries as the uncapped run
      const auto full = soft_nms(in, 0.5, 1000);
      CHECK(full.size() == in.size());
      for (std::size_t i = 0; i < out.size(); ++i) CHECK(full[i].box == out[i].box);
    }
  }
}

TEST_CASE("iou") {
  CHECK(iou({0, 0, 2, 2}, {0, 0, 2, 2}) == 1.0);
  CHECK(iou({0, 0, 2, 2}, {3, 3, 4, 4}) == 0.0);
  CHECK(iou({0, 0, 2, 2}, {1, 0, 3, 2}) == doctest::Approx(1.0 / 3));
}

TEST_CASE("decoding ground-truth targets recovers every box") {
  const auto samples = generate_samples(40, 73, DataConfig{});
  TargetConfig tc;
  for (const auto& s : samples) {
    const auto t = make_targets(s.annotations, tc);
    const auto [tl, br] = maps_from_targets(t);
    const auto dets = decode(tl, br, DecodeConfig{});
    for (const auto& a : s.annotations) {
      const bool found = std::any_of(dets.begin(), dets.end(), [&](const Detection& d) {
        return d.cls == a.cls && d.score == 1.0f && std::abs(d.box.x1 - a.box.x1) < 2 && std::abs(d.box.y1 - a.box.y1) < 2 &&
               std::abs(d.box.x2 - a.box.x2) < 2 && std::abs(d.box.y2 - a.box.y2) < 2;
      });
      INFO(s.id);
      CHECK(found);
    }
  }
}

TEST_CASE("flip fusion mirrors boxes back") {
  const auto s = generate_samples(1, 79, DataConfig{}).front();
  const auto f = hflip(s);
  TargetConfig tc;
  const auto [tl, br] = maps_from_targets(make_targets(s.annotations, tc));
  const auto [tlf, brf] = maps_from_targets(make_targets(f.annotations, tc));
  const auto plain = decode(tl, br, DecodeConfig{});
  const auto fused = decode_flip_fused(tl, br, tlf, brf, 64.0, DecodeConfig{});
  for (const auto& a : s.annotations) {
    // original and mirrored copies land on the same box; soft-NMS decays the duplicate
    int near = 0;
    for (const auto& d : fused) near += d.cls == a.cls && iou(d.box, a.box) > 0.8;
    CHECK(near >= 2);
  }
  CHECK(fused.front().score == 1.0f);
  CHECK(plain.front().score == 1.0f);
}

TEST_CASE("jsonl output") {
  const auto text = detections_jsonl("img7", {det(0.5f, {1, 2, 3, 4}, 2), det(0.25f, {0, 0, 1, 1})});
  std::istringstream is(text);
  std::string line;
  std::vector<nlohmann::json> rows;
  while (std::getline(is, line)) rows.push_back(nlohmann::json::parse(line));
  REQUIRE(rows.size() == 2);
  CHECK(rows[0]["image_id"] == "img7");
  CHECK(rows[0]["class"] == 2);
  CHECK(rows[0]["score"].get<double>() == 0.5);
  CHECK(rows[0]["box"] == nlohmann::json::array({1.0, 2.0, 3.0, 4.0}));
}
