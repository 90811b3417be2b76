#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "eamser/gradcheck.hpp"
#include "eamser/nn.hpp"
#include "test_util.hpp"

using namespace eamser;
using eamser::testing::gaussian;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

namespace {

template <typename Derived>
std::span<double> span_of(Eigen::PlainObjectBase<Derived>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
template <typename Derived>
std::span<const double> cspan_of(const Eigen::PlainObjectBase<Derived>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

MsaParams<double> random_msa(Eigen::Index d, int heads, std::mt19937_64& rng) {
  MsaParams<double> p = init_msa<double>(d, heads, rng);
  p.bq = gaussian(d, 1, rng, 0.1).col(0);
  p.bv = gaussian(d, 1, rng, 0.1).col(0);
  p.bo = gaussian(d, 1, rng, 0.1).col(0);
  return p;
}

}  // namespace

TEST_CASE("linear layer") {
  std::mt19937_64 rng(1);
  Mat x = gaussian(3, 4, rng);
  SUBCASE("identity weight") {
    Linear<double> p{Mat::Identity(4, 4), Vec::Zero(4)};
    CHECK(linear_forward(x, p) == x);
  }
  SUBCASE("zero input broadcasts the bias") {
    Linear<double> p{gaussian(4, 2, rng), Vec(Eigen::Vector2d(0.5, -1.5))};
    Mat y = linear_forward(Mat(Mat::Zero(3, 4)), p);
    for (int r = 0; r < 3; ++r) CHECK(y.row(r) == p.bias.transpose());
  }
  SUBCASE("shape mismatch") {
    Linear<double> p{gaussian(5, 2, rng), Vec::Zero(2)};
    CHECK_THROWS_AS(linear_forward(x, p), Error);
  }
  SUBCASE("gradients match finite differences") {
    Linear<double> p{gaussian(4, 2, rng), gaussian(2, 1, rng).col(0)};
    const Mat r = gaussian(3, 2, rng);
    auto loss = [&] { return (linear_forward(x, p).array() * r.array()).sum(); };
    const auto g = linear_backward(x, p, r);
    CHECK(grad_check(loss, span_of(p.weight), cspan_of(g.params.weight)).max_rel_error <= 1e-6);
    CHECK(grad_check(loss, span_of(p.bias), cspan_of(g.params.bias)).max_rel_error <= 1e-6);
    CHECK(grad_check(loss, span_of(x), cspan_of(g.input)).max_rel_error <= 1e-6);
  }
  SUBCASE("vector form agrees with the matrix form") {
    Linear<double> p{gaussian(4, 2, rng), gaussian(2, 1, rng).col(0)};
    Vec v = x.row(1).transpose();
    Vec y = linear_forward(v, p);
    CHECK((y - linear_forward(x, p).row(1).transpose()).norm() <= 1e-14);
    const Vec dy = gaussian(2, 1, rng).col(0);
    auto loss = [&] { return linear_forward(v, p).dot(dy); };
    const auto g = linear_backward(v, p, dy);
    CHECK(grad_check(loss, span_of(p.weight), cspan_of(g.params.weight)).max_rel_error <= 1e-6);
    CHECK(grad_check(loss, span_of(v), cspan_of(g.input)).max_rel_error <= 1e-6);
  }
}

TEST_CASE("softmax_rows") {
  Mat eq = Mat::Constant(2, 4, 3.0);
  CHECK((softmax_rows(eq).array() - 0.25).abs().maxCoeff() <= 1e-15);

  Mat big(1, 2);
  big << 1000.0, 0.0;
  Mat s = softmax_rows(big);
  CHECK(s.allFinite());
  CHECK(s(0, 0) == 1.0);
  CHECK(s(0, 1) == doctest::Approx(0.0).epsilon(1e-300));

  std::mt19937_64 rng(2);
  Mat r = softmax_rows(Mat(gaussian(5, 7, rng, 3.0)));
  CHECK((r.array() >= 0).all());
  CHECK((r.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-12);

  SUBCASE("backward") {
    Mat x = gaussian(4, 5, rng);
    const Mat dy = gaussian(4, 5, rng);
    auto loss = [&] { return (softmax_rows(x).array() * dy.array()).sum(); };
    const Mat dx = softmax_rows_backward(softmax_rows(x), dy);
    CHECK(grad_check(loss, span_of(x), cspan_of(dx)).max_rel_error <= 1e-6);
  }
}

TEST_CASE("msa") {
  std::mt19937_64 rng(3);
  SUBCASE("zero parameters give the identity") {
    Mat x = gaussian(7, 32, rng);
    CHECK(msa_forward(x, MsaParams<double>::zero(32, 16)) == x);
  }
  SUBCASE("single frame attends to itself") {
    MsaParams<double> p = random_msa(32, 16, rng);
    Mat x = gaussian(1, 32, rng);
    Mat v = x * p.wv;
    v.rowwise() += p.bv.transpose();
    Mat expected = x + v * p.wo;
    expected.rowwise() += p.bo.transpose();
    CHECK((msa_forward(x, p) - expected).cwiseAbs().maxCoeff() <= 1e-13);
  }
  SUBCASE("heads must divide the dimension") {
    CHECK_THROWS_AS(MsaParams<double>::zero(30, 16).validate(), Error);
  }
  SUBCASE("attention rows sum to one") {
    MsaParams<double> p = random_msa(32, 16, rng);
    MsaCache<double> cache;
    msa_forward(Mat(gaussian(6, 32, rng)), p, &cache);
    REQUIRE(cache.attn.size() == 16);
    for (const auto& a : cache.attn)
      CHECK((a.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-12);
  }
  SUBCASE("permutation equivariance") {
    MsaParams<double> p = random_msa(32, 16, rng);
    Mat x = gaussian(8, 32, rng);
    std::vector<int> perm(8);
    for (int trial = 0; trial < 10; ++trial) {
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      Eigen::PermutationMatrix<Eigen::Dynamic> pm(Eigen::Map<Eigen::VectorXi>(perm.data(), 8));
      const Mat lhs = msa_forward(Mat(pm * x), p);
      const Mat rhs = pm * msa_forward(x, p);
      CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-12);

      PoolParams<double> pool = init_pool<double>(32, rng);
      for (bool normalize : {false, true}) {
        const Vec f1 = frame_attention_pool(lhs, pool, normalize);
        const Vec f2 = frame_attention_pool(msa_forward(x, p), pool, normalize);
        CHECK((f1 - f2).cwiseAbs().maxCoeff() <= 1e-12);
      }
    }
  }
  SUBCASE("gradients match finite differences") {
    MsaParams<double> p = random_msa(32, 16, rng);
    Mat x = gaussian(6, 32, rng);
    const Mat r = gaussian(6, 32, rng);
    auto loss = [&] { return (msa_forward(x, p).array() * r.array()).sum(); };
    MsaCache<double> cache;
    msa_forward(x, p, &cache);
    const auto g = msa_backward(cache, p, r);
    CHECK(grad_check(loss, span_of(p.wq), cspan_of(g.params.wq)).max_rel_error <= 1e-4);
    CHECK(grad_check(loss, span_of(p.wk), cspan_of(g.params.wk)).max_rel_error <= 1e-4);
    CHECK(grad_check(loss, span_of(p.wv), cspan_of(g.params.wv)).max_rel_error <= 1e-4);
    CHECK(grad_check(loss, span_of(p.wo), cspan_of(g.params.wo)).max_rel_error <= 1e-4);
    CHECK(grad_check(loss, span_of(p.bq), cspan_of(g.params.bq)).max_rel_error <= 1e-4);
    CHECK(grad_check(loss, span_of(p.bv), cspan_of(g.params.bv)).max_rel_error <= 1e-4);
    CHECK(grad_check(loss, span_of(p.bo), cspan_of(g.params.bo)).max_rel_error <= 1e-4);
    CHECK(grad_check(loss, span_of(x), cspan_of(g.input)).max_rel_error <= 1e-4);
  }
}

TEST_CASE("frame attention pooling") {
  std::mt19937_64 rng(4);
  SUBCASE("single frame with unit score") {
    Mat x = gaussian(1, 5, rng);
    PoolParams<double> p{Vec::Zero(5), 1.0};
    CHECK(frame_attention_pool(x, p) == Vec(x.row(0).transpose()));
  }
  SUBCASE("constant 1/T score gives the frame mean") {
    Mat x = gaussian(9, 5, rng);
    PoolParams<double> p{Vec::Zero(5), 1.0 / 9.0};
    CHECK((frame_attention_pool(x, p) - mean_pool(x)).cwiseAbs().maxCoeff() <= 1e-14);
    // Softmax of constant scores is the same uniform weighting.
    PoolParams<double> q{Vec::Zero(5), 3.0};
    CHECK((frame_attention_pool(x, q, true) - mean_pool(x)).cwiseAbs().maxCoeff() <= 1e-14);
  }
  SUBCASE("shape mismatch") {
    PoolParams<double> p{Vec::Zero(4), 0.0};
    CHECK_THROWS_AS(frame_attention_pool(Mat(gaussian(3, 5, rng)), p), Error);
  }
  for (bool normalize : {false, true}) {
    CAPTURE(normalize);
    Mat x = gaussian(8, 16, rng);
    PoolParams<double> p = init_pool<double>(16, rng);
    p.bias = 0.3;
    const Vec r = gaussian(16, 1, rng).col(0);
    auto loss = [&] { return frame_attention_pool(x, p, normalize).dot(r); };
    const auto g = frame_attention_pool_backward(x, p, normalize, r);
    CHECK(grad_check(loss, span_of(p.weight), cspan_of(g.params.weight)).max_rel_error <= 1e-4);
    if (normalize) {
      CHECK(g.params.bias == 0.0);
      const double saved = p.bias;
      const double before = loss();
      p.bias += 0.5;
      CHECK(std::abs(loss() - before) <= 1e-12);
      p.bias = saved;
    } else {
      CHECK(grad_check(loss, std::span<double>(&p.bias, 1),
                       std::span<const double>(&g.params.bias, 1))
                .max_rel_error <= 1e-4);
    }
    CHECK(grad_check(loss, span_of(x), cspan_of(g.input)).max_rel_error <= 1e-4);
  }
}

TEST_CASE("baseline poolers") {
  Mat one(1, 3);
  one << 1, -2, 3;
  CHECK(max_pool(one) == Vec(one.row(0).transpose()));
  CHECK(mean_pool(one) == Vec(one.row(0).transpose()));

  Mat x(2, 2);
  x << 1, 5, 3, 2;
  CHECK(max_pool(x) == Vec(Eigen::Vector2d(3, 5)));
  CHECK(mean_pool(x) == Vec(Eigen::Vector2d(2, 3.5)));

  const Vec df(Eigen::Vector2d(0.7, -1.1));
  Mat dmax = max_pool_backward(x, df);
  CHECK(dmax(1, 0) == 0.7);
  CHECK(dmax(0, 1) == -1.1);
  CHECK(dmax(0, 0) == 0.0);
  CHECK(dmax(1, 1) == 0.0);

  Mat tie(2, 1);
  tie << 4, 4;
  CHECK(max_pool_backward(tie, Vec(Vec::Ones(1)))(0, 0) == 1.0);
  CHECK(max_pool_backward(tie, Vec(Vec::Ones(1)))(1, 0) == 0.0);

  std::mt19937_64 rng(5);
  Mat y = gaussian(6, 4, rng);
  const Vec r = gaussian(4, 1, rng).col(0);
  auto loss = [&] { return mean_pool(y).dot(r); };
  CHECK(grad_check(loss, span_of(y), cspan_of(mean_pool_backward(y, r))).max_rel_error <= 1e-6);
  auto mloss = [&] { return max_pool(y).dot(r); };
  CHECK(grad_check(mloss, span_of(y), cspan_of(max_pool_backward(y, r))).max_rel_error <= 1e-6);
}

TEST_CASE("grad_check itself") {
  double x = 3.0;
  double analytic = 6.0;
  auto f = [&] { return x * x; };
  auto ok = grad_check(f, std::span<double>(&x, 1), std::span<const double>(&analytic, 1));
  CHECK(ok.passed());
  CHECK(ok.worst_numeric == doctest::Approx(6.0).epsilon(1e-9));
  CHECK(x == 3.0);

  double wrong = 5.0;
  auto bad = grad_check(f, std::span<double>(&x, 1), std::span<const double>(&wrong, 1));
  CHECK_FALSE(bad.passed());
  CHECK(bad.max_rel_error > 1e-4);

  CHECK(relative_error(0.0, 1e-12) <= 1e-4);
}
