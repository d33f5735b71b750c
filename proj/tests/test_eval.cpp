#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "cmsf/eval.hpp"
#include "cmsf/ops.hpp"
#include "cmsf/trainer.hpp"
#include "oracles.hpp"

using namespace cmsf;

namespace {

std::vector<int> random_labels(std::size_t n, int classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, classes - 1);
  std::vector<int> out(n);
  for (auto& l : out) l = d(rng);
  return out;
}

// Two tight clusters around +e0 and -e0.
Matrix two_clusters(std::size_t n, std::size_t dim, std::mt19937_64& rng, std::vector<int>& labels) {
  std::normal_distribution<double> g(0.0, 0.05);
  Matrix m(n, dim);
  labels.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(i % 2);
    for (std::size_t j = 0; j < dim; ++j) m(i, j) = g(rng);
    m(i, 0) += labels[i] == 0 ? 1.0 : -1.0;
  }
  return l2_row_normalize(m);
}

std::vector<std::size_t> iota_ids(std::size_t n, std::size_t start = 0) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), start);
  return v;
}

}  // namespace

TEST_SUITE("knn") {
  TEST_CASE("a duplicated train point with k=1 gets its own label") {
    std::mt19937_64 rng(1);
    const Matrix train = oracle::random_unit_rows(20, 5, rng);
    const auto labels = random_labels(20, 4, rng);
    CHECK(knn_classify(train, labels, train, labels, 1) == 1.0);
  }

  TEST_CASE("two orthogonal one-point classes") {
    const Matrix train = Matrix::from_rows({{1, 0}, {0, 1}});
    const std::vector<int> labels{0, 1};
    CHECK(knn_predict(train, labels, train, 1) == std::vector<int>{0, 1});
  }

  TEST_CASE("random 200-point case equals the exhaustive oracle") {
    std::mt19937_64 rng(2);
    const Matrix train = oracle::random_unit_rows(200, 6, rng);
    const Matrix test = oracle::random_unit_rows(50, 6, rng);
    const auto labels = random_labels(200, 5, rng);
    for (std::size_t k : {1u, 3u, 10u}) {
      const auto got = knn_predict(train, labels, test, k);
      for (std::size_t i = 0; i < test.rows(); ++i) {
        const std::vector<double> q(test.row(i).begin(), test.row(i).end());
        CHECK(got[i] == oracle::brute_force_knn(train, labels, q, k));
      }
    }
  }

  TEST_CASE("tie rules: equal similarity prefers the smaller index, equal votes the smaller label") {
    const Matrix train = Matrix::from_rows({{1, 0}, {1, 0}, {0, 1}});
    const std::vector<int> labels{3, 1, 0};
    const Matrix q = Matrix::from_rows({{1, 0}});
    CHECK(knn_predict(train, labels, q, 1) == std::vector<int>{3});
    CHECK(knn_predict(train, labels, q, 2) == std::vector<int>{1});
  }

  TEST_CASE("invariant under a global rotation") {
    std::mt19937_64 rng(3);
    const Matrix train = oracle::random_unit_rows(80, 6, rng);
    const Matrix test = oracle::random_unit_rows(30, 6, rng);
    const auto labels = random_labels(80, 3, rng);
    const auto test_labels = random_labels(30, 3, rng);
    const Matrix r = oracle::random_rotation(6, rng);
    const Matrix train_r = oracle::naive_matmul(train, r);
    const Matrix test_r = oracle::naive_matmul(test, r);
    CHECK(knn_predict(train, labels, test, 5) == knn_predict(train_r, labels, test_r, 5));
    CHECK(knn_classify(train, labels, test, test_labels, 5) ==
          knn_classify(train_r, labels, test_r, test_labels, 5));
  }

  TEST_CASE("errors") {
    const Matrix train = Matrix::from_rows({{1, 0}, {0, 1}});
    const std::vector<int> labels{0, 1};
    CHECK_THROWS_AS(knn_predict(train, labels, train, 3), std::invalid_argument);
    CHECK_THROWS_AS(knn_predict(train, labels, train, 0), std::invalid_argument);
    CHECK_THROWS_AS(knn_predict(train, std::vector<int>{0}, train, 1), std::invalid_argument);
  }
}

TEST_SUITE("linear probe") {
  TEST_CASE("standardizer: train statistics, zero-variance dimension keeps scale 1") {
    const Matrix x = Matrix::from_rows({{1, 5, 2}, {3, 5, 4}});
    const auto s = Standardizer::fit(x);
    CHECK(s.mean == std::vector<double>{2, 5, 3});
    CHECK(s.scale[0] == doctest::Approx(1.0));
    CHECK(s.scale[1] == 1.0);
    const Matrix y = s.apply(x);
    CHECK(y(0, 0) == doctest::Approx(-1.0));
    CHECK(y(1, 0) == doctest::Approx(1.0));
    CHECK(y(0, 1) == 0.0);
  }

  TEST_CASE("separable two-class embeddings reach accuracy 1") {
    std::mt19937_64 rng(4);
    std::vector<int> ltr, lte;
    const Matrix train = two_clusters(200, 6, rng, ltr);
    const Matrix test = two_clusters(100, 6, rng, lte);
    const auto r = linear_probe(train, ltr, test, lte, 2, ProbeConfig{});
    CHECK(r.train_accuracy == 1.0);
    CHECK(r.test_accuracy == 1.0);
  }

  TEST_CASE("shuffled labels give chance accuracy") {
    std::mt19937_64 rng(5);
    const Matrix train = oracle::random_unit_rows(400, 8, rng);
    const Matrix test = oracle::random_unit_rows(2000, 8, rng);
    const auto ltr = random_labels(400, 4, rng);
    const auto lte = random_labels(2000, 4, rng);
    ProbeConfig cfg;
    cfg.epochs = 20;
    const auto r = linear_probe(train, ltr, test, lte, 4, cfg);
    // Binomial band: 0.25 +/- 5 sigma with n = 2000.
    CHECK(std::fabs(r.test_accuracy - 0.25) < 5.0 * std::sqrt(0.25 * 0.75 / 2000.0));
  }

  TEST_CASE("standardization uses train statistics only") {
    std::mt19937_64 rng(6);
    std::vector<int> ltr, lte;
    const Matrix train = two_clusters(60, 4, rng, ltr);
    Matrix test = two_clusters(40, 4, rng, lte);
    for (auto& x : test.values()) x *= 3.0;  // shifts the test distribution
    const auto r = linear_probe(train, ltr, test, lte, 2, ProbeConfig{});
    const Matrix unit = l2_row_normalize(train);
    for (std::size_t j = 0; j < 4; ++j) {
      double m = 0.0, v = 0.0;
      for (std::size_t i = 0; i < unit.rows(); ++i) m += unit(i, j);
      m /= static_cast<double>(unit.rows());
      for (std::size_t i = 0; i < unit.rows(); ++i) v += (unit(i, j) - m) * (unit(i, j) - m);
      v /= static_cast<double>(unit.rows());
      CHECK(r.standardizer.mean[j] == doctest::Approx(m).epsilon(1e-12));
      CHECK(r.standardizer.scale[j] == doctest::Approx(std::sqrt(v)).epsilon(1e-9));
    }
  }

  TEST_CASE("deterministic and validated") {
    std::mt19937_64 rng(7);
    std::vector<int> ltr, lte;
    const Matrix train = two_clusters(50, 4, rng, ltr);
    const Matrix test = two_clusters(20, 4, rng, lte);
    ProbeConfig cfg;
    cfg.epochs = 3;
    CHECK(linear_probe(train, ltr, test, lte, 2, cfg).test_accuracy ==
          linear_probe(train, ltr, test, lte, 2, cfg).test_accuracy);
    CHECK_THROWS_AS(linear_probe(train, ltr, test, lte, 1, cfg), std::invalid_argument);
    cfg.lr0 = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  }
}

TEST_SUITE("recall@1") {
  TEST_CASE("self-excluded gallery of two tight clusters gives 1") {
    std::mt19937_64 rng(8);
    std::vector<int> labels;
    const Matrix x = two_clusters(40, 4, rng, labels);
    const auto ids = iota_ids(40);
    CHECK(recall_at_1(x, labels, ids, x, labels, ids) == 1.0);
  }

  TEST_CASE("single-class data gives 1") {
    std::mt19937_64 rng(9);
    const Matrix x = oracle::random_unit_rows(15, 3, rng);
    const std::vector<int> labels(15, 2);
    const auto ids = iota_ids(15);
    CHECK(recall_at_1(x, labels, ids, x, labels, ids) == 1.0);
  }

  TEST_CASE("self match is skipped even when it is the only exact hit") {
    const Matrix q = Matrix::from_rows({{1, 0}});
    const Matrix g = Matrix::from_rows({{1, 0}, {0.8, 0.6}, {0.6, 0.8}});
    const std::vector<int> ql{0};
    const std::vector<int> gl{0, 1, 0};
    const std::vector<std::size_t> qid{5};
    CHECK(recall_at_1(q, ql, qid, g, gl, std::vector<std::size_t>{5, 6, 7}) == 0.0);
    CHECK(recall_at_1(q, ql, qid, g, gl, std::vector<std::size_t>{1, 6, 7}) == 1.0);
  }

  TEST_CASE("random embeddings with balanced classes give about 1/C") {
    std::mt19937_64 rng(10);
    const Matrix q = oracle::random_unit_rows(3000, 8, rng);
    const Matrix g = oracle::random_unit_rows(600, 8, rng);
    std::vector<int> ql(3000), gl(600);
    for (std::size_t i = 0; i < ql.size(); ++i) ql[i] = static_cast<int>(i % 4);
    for (std::size_t i = 0; i < gl.size(); ++i) gl[i] = static_cast<int>(i % 4);
    const double r = recall_at_1(q, ql, iota_ids(3000), g, gl, iota_ids(600, 10000));
    CHECK(std::fabs(r - 0.25) < 5.0 * std::sqrt(0.25 * 0.75 / 3000.0));
  }

  TEST_CASE("invariant under a global rotation") {
    std::mt19937_64 rng(11);
    const Matrix x = oracle::random_unit_rows(60, 5, rng);
    const auto labels = random_labels(60, 3, rng);
    const auto ids = iota_ids(60);
    const Matrix xr = oracle::naive_matmul(x, oracle::random_rotation(5, rng));
    CHECK(recall_at_1(x, labels, ids, x, labels, ids) == recall_at_1(xr, labels, ids, xr, labels, ids));
  }
}

TEST_SUITE("purity report") {
  TEST_CASE("clean labels give purity 1 for both top-k and random-k") {
    SyntheticSpec s;
    s.samples = 400;
    s.seed = 2;
    const auto data = generate(s);
    const auto enc = EncoderPair::create(EncoderSpec::desk(s.ambient_dim), 3);
    const auto rep = purity_report(enc, data, 10, 1);
    CHECK(rep.row("all").topk == 1.0);
    CHECK(rep.row("all").random == 1.0);
    CHECK(rep.row("all").queries == 400);
    CHECK(rep.row("corrupted").queries == 0);
  }

  TEST_CASE("hand-built embeddings: top-k finds the true class, random-k the mix") {
    // Two true classes on two axes; training labels flipped for half of class 1.
    LabeledDataset d;
    d.classes = 2;
    const std::size_t n = 40;
    d.features = Matrix(n, 2);
    Matrix emb(n, 2);
    for (std::size_t i = 0; i < n; ++i) {
      const int t = static_cast<int>(i % 2);
      d.true_labels.push_back(t);
      d.train_labels.push_back(t == 1 && i % 4 == 1 ? 0 : t);
      d.label_mask.push_back(1);
      d.mode_ids.push_back(t);
      d.sample_ids.push_back(i);
      emb(i, static_cast<std::size_t>(t)) = 1.0;
    }
    const auto rep = purity_report(emb, d, 3, 5);
    const auto& clean = rep.row("clean");
    CHECK(clean.queries == 30);
    CHECK(rep.row("corrupted").queries == 10);
    CHECK(rep.row("all").topk > rep.row("all").random);
    CHECK(rep.row("corrupted").topk == 1.0);
    std::ostringstream os;
    rep.write_markdown(os);
    CHECK(os.str().find("corrupted") != std::string::npos);
  }

  TEST_CASE("deterministic in the seed") {
    SyntheticSpec s;
    s.samples = 200;
    const auto data = inject_noise(generate(s), 0.5, 1);
    const auto enc = EncoderPair::create(EncoderSpec::desk(s.ambient_dim), 3);
    CHECK(purity_report(enc, data, 5, 9).row("all").random == purity_report(enc, data, 5, 9).row("all").random);
  }
}
