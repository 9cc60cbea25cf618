#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "doctest.h"
#include "pmx/csv.hpp"
#include "pmx/events.hpp"
#include "pmx/lin_pk.hpp"
#include "pmx/models.hpp"
#include "pmx/rng.hpp"
#include "pmx/schedule_solver.hpp"

namespace {

// Independent density formulas (different algebraic grouping than the
// library's) for desk-checking log joints.
constexpr double kSqrt2Pi = 2.506628274631000502;

double desk_lognormal(double y, double mu, double sigma) {
  const double r = (std::log(y) - mu) / sigma;
  return -std::log(y * sigma * kSqrt2Pi) - 0.5 * r * r;
}

double desk_half_normal(double y, double sigma) {
  return std::log(2.0 / (sigma * kSqrt2Pi)) - 0.5 * y * y / (sigma * sigma);
}

pmx::EventRecord dose_rec(int id, double time, double amt, int cmt, std::size_t row) {
  pmx::EventRecord d;
  d.subject = id;
  d.time = time;
  d.amt = amt;
  d.evid = 1;
  d.cmt = cmt;
  d.origin_row = row;
  return d;
}

pmx::EventRecord obs_rec(int id, double time, double dv, int cmt, std::size_t row) {
  pmx::EventRecord o;
  o.subject = id;
  o.time = time;
  o.evid = 0;
  o.cmt = cmt;
  o.dv = dv;
  o.origin_row = row;
  return o;
}

// One bolus, three concentration readings.
pmx::Dataset single_dose_ds() {
  std::vector<pmx::EventRecord> recs;
  recs.push_back(dose_rec(1, 0.0, 1000.0, 1, 1));
  recs.push_back(obs_rec(1, 1.0, 20.0, 2, 2));
  recs.push_back(obs_rec(1, 2.0, 15.0, 2, 3));
  recs.push_back(obs_rec(1, 6.0, 8.0, 2, 4));
  return pmx::make_dataset(recs);
}

struct SubjectBundle {
  double wt;
  double dv1, dv4;
};

pmx::Dataset pop_ds(const std::vector<int>& ids, const std::vector<SubjectBundle>& bundles) {
  std::vector<pmx::EventRecord> recs;
  std::vector<double> wt;
  std::size_t row = 1;
  for (std::size_t j = 0; j < ids.size(); ++j) {
    recs.push_back(dose_rec(ids[j], 0.0, 1200.0, 1, row++));
    wt.push_back(bundles[j].wt);
    recs.push_back(obs_rec(ids[j], 1.0, bundles[j].dv1, 2, row++));
    wt.push_back(bundles[j].wt);
    recs.push_back(obs_rec(ids[j], 4.0, bundles[j].dv4, 2, row++));
    wt.push_back(bundles[j].wt);
  }
  return pmx::make_dataset(recs, {{"WT", wt}});
}

// Baseline neutrophil count before the dose, then mixed streams.
pmx::Dataset fk_ds() {
  std::vector<pmx::EventRecord> recs;
  recs.push_back(obs_rec(1, 0.0, 5.1, 8, 1));
  recs.push_back(dose_rec(1, 0.0, 1200.0, 1, 2));
  recs.push_back(obs_rec(1, 1.0, 22.0, 2, 3));
  recs.push_back(obs_rec(1, 4.0, 11.0, 2, 4));
  recs.push_back(obs_rec(1, 72.0, 4.2, 8, 5));
  recs.push_back(obs_rec(1, 160.0, 4.8, 8, 6));
  return pmx::make_dataset(recs);
}

const std::vector<double> kFkMedians{10.0, 15.0, 35.0, 105.0, 2.5, 125.0,
                                     5.0,  3e-4, 0.17, 0.5,   0.3};

void check_close(double a, double b, double tol) { CHECK(std::fabs(a - b) <= tol); }

void check_gradient(const pmx::Model& m, const std::vector<double>& z, double value_tol) {
  const pmx::GradResult g = m.log_joint_grad(z);
  REQUIRE(g.value_finite);
  REQUIRE(g.grad_finite);
  const double f0 = m.log_joint(z);
  if (value_tol == 0.0) {
    CHECK(g.value == f0);
  } else {
    CHECK(g.value == doctest::Approx(f0).epsilon(value_tol));
  }
  std::vector<double> x = z;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double h = 1e-5 * std::max(1.0, std::fabs(z[i]));
    x[i] = z[i] + h;
    const double fp = m.log_joint(x);
    x[i] = z[i] - h;
    const double fm = m.log_joint(x);
    x[i] = z[i];
    const double fd = (fp - fm) / (2.0 * h);
    CHECK(std::fabs(g.grad[i] - fd) <= 1e-6 * std::max(1.0, std::fabs(fd)));
  }
}

std::size_t count_prefix(const std::vector<std::string>& names, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& s : names) n += s.rfind(prefix + ".", 0) == 0 ? 1 : 0;
  return n;
}

}  // namespace

TEST_SUITE("models") {

TEST_CASE("twocpt log joint matches a hand-computed sum at the prior medians") {
  const pmx::Dataset ds = single_dose_ds();
  const auto m = pmx::make_model("twocpt", ds);
  const std::vector<double> theta{10.0, 15.0, 35.0, 105.0, 2.5, 0.5};
  const std::vector<double> z = m->unconstrain(theta);

  const pmx::Dataset exp_ds = pmx::expand_addl(ds);
  const pmx::TwoCptParams<double> p{10.0, 15.0, 35.0, 105.0, 2.5};
  const pmx::Matrix<double> sol =
      pmx::solve_linear_twocpt<double>(exp_ds.records, p, pmx::DoseControls::defaults(3));

  double prior = 0.0;
  prior += desk_lognormal(10.0, std::log(10.0), 0.25);
  prior += desk_lognormal(15.0, std::log(15.0), 0.5);
  prior += desk_lognormal(35.0, std::log(35.0), 0.25);
  prior += desk_lognormal(105.0, std::log(105.0), 0.5);
  prior += desk_lognormal(2.5, std::log(2.5), 1.0);
  prior += desk_half_normal(0.5, 1.0);
  double lik = 0.0;
  const double dvs[3] = {20.0, 15.0, 8.0};
  for (int k = 0; k < 3; ++k) {
    lik += desk_lognormal(dvs[k], std::log(sol(1, k + 1) / 35.0), 0.5);
  }
  const double jac = std::accumulate(z.begin(), z.end(), 0.0);

  CHECK(m->log_joint(z) == doctest::Approx(prior + lik + jac).epsilon(1e-12));
  const pmx::LogJointParts parts = m->log_joint_parts(z);
  CHECK(parts.prior == doctest::Approx(prior).epsilon(1e-12));
  CHECK(parts.likelihood == doctest::Approx(lik).epsilon(1e-12));
  CHECK(parts.jacobian == doctest::Approx(jac).epsilon(1e-12));
  CHECK(parts.total() == doctest::Approx(m->log_joint(z)).epsilon(1e-13));
}

TEST_CASE("scaling the observations moves only the likelihood part") {
  std::vector<pmx::EventRecord> recs;
  recs.push_back(dose_rec(1, 0.0, 1000.0, 1, 1));
  recs.push_back(obs_rec(1, 1.0, 40.0, 2, 2));
  recs.push_back(obs_rec(1, 2.0, 30.0, 2, 3));
  recs.push_back(obs_rec(1, 6.0, 16.0, 2, 4));
  const auto m1 = pmx::make_model("twocpt", single_dose_ds());
  const auto m2 = pmx::make_model("twocpt", pmx::make_dataset(recs));

  pmx::Rng rng(42);
  const std::vector<double> z = m1->draw_init(rng);
  const pmx::LogJointParts p1 = m1->log_joint_parts(z);
  const pmx::LogJointParts p2 = m2->log_joint_parts(z);
  CHECK(p1.prior == p2.prior);
  CHECK(p1.jacobian == p2.jacobian);
  CHECK(p1.likelihood != p2.likelihood);
}

TEST_CASE("constrain/unconstrain round-trips on prior draws for every model") {
  struct Case {
    const char* name;
    pmx::Dataset ds;
  };
  std::vector<Case> cases;
  cases.push_back({"twocpt", single_dose_ds()});
  cases.push_back({"onecpt", single_dose_ds()});
  cases.push_back({"twocpt_pop",
                   pop_ds({1, 2, 3}, {{70.0, 25.0, 12.0}, {85.0, 18.0, 9.0}, {55.0, 30.0, 16.0}})});
  cases.push_back({"fk_pkpd", fk_ds()});

  for (const Case& c : cases) {
    CAPTURE(c.name);
    const auto m = pmx::make_model(c.name, c.ds);
    CHECK(m->name() == c.name);
    CHECK(m->param_names().size() == m->dim());
    pmx::Rng rng(std::string(c.name).size() * 1000 + 7);
    for (int rep = 0; rep < 3; ++rep) {
      const std::vector<double> z = m->draw_init(rng);
      REQUIRE(z.size() == m->dim());
      const std::vector<double> theta = m->constrain(z);
      m->validate_constrained(theta);
      const std::vector<double> z2 = m->unconstrain(theta);
      for (std::size_t i = 0; i < z.size(); ++i) {
        check_close(z[i], z2[i], 1e-12 * std::max(1.0, std::fabs(z[i])));
      }
      const std::vector<double> theta2 = m->constrain(z2);
      for (std::size_t i = 0; i < theta.size(); ++i) {
        check_close(theta[i], theta2[i], 1e-12 * std::max(1.0, std::fabs(theta[i])));
      }
    }
  }
}

TEST_CASE("autodiff gradients match central finite differences") {
  SUBCASE("twocpt") {
    const auto m = pmx::make_model("twocpt", single_dose_ds());
    const std::vector<double> medians{10.0, 15.0, 35.0, 105.0, 2.5, 0.5};
    check_gradient(*m, m->unconstrain(medians), 0.0);
    pmx::Rng rng(11);
    for (int rep = 0; rep < 2; ++rep) check_gradient(*m, m->draw_init(rng), 0.0);
  }
  SUBCASE("onecpt") {
    const auto m = pmx::make_model("onecpt", single_dose_ds());
    pmx::Rng rng(12);
    for (int rep = 0; rep < 2; ++rep) check_gradient(*m, m->draw_init(rng), 0.0);
  }
  SUBCASE("twocpt_pop") {
    const auto m = pmx::make_model(
        "twocpt_pop",
        pop_ds({1, 2, 3}, {{70.0, 25.0, 12.0}, {85.0, 18.0, 9.0}, {55.0, 30.0, 16.0}}));
    pmx::Rng rng(13);
    for (int rep = 0; rep < 2; ++rep) check_gradient(*m, m->draw_init(rng), 0.0);
  }
  SUBCASE("fk_pkpd") {
    pmx::ModelOptions opts;
    opts.ode.rtol = opts.ode.atol = 1e-12;
    const auto m = pmx::make_model("fk_pkpd", fk_ds(), opts);
    check_gradient(*m, m->unconstrain(kFkMedians), 1e-12);
    pmx::Rng rng(14);
    check_gradient(*m, m->draw_init(rng), 1e-12);
  }
}

TEST_CASE("fk_pkpd: coupled and full-numeric log joints agree") {
  pmx::ModelOptions coupled;
  pmx::ModelOptions full;
  full.fk_full_numeric = true;
  const auto mc = pmx::make_model("fk_pkpd", fk_ds(), coupled);
  const auto mf = pmx::make_model("fk_pkpd", fk_ds(), full);
  const std::vector<double> z0 = mc->unconstrain(kFkMedians);
  CHECK(std::fabs(mc->log_joint(z0) - mf->log_joint(z0)) <= 1e-4);
  pmx::Rng rng(21);
  const std::vector<double> z1 = mc->draw_init(rng);
  CHECK(std::fabs(mc->log_joint(z1) - mf->log_joint(z1)) <= 1e-4);
}

TEST_CASE("fk_solve: alpha = 0 leaves the cell lineage at baseline") {
  const pmx::Dataset ds = pmx::expand_addl(fk_ds());
  const std::vector<double> theta9{10.0, 15.0, 35.0, 105.0, 2.5, 125.0, 5.0, 0.0, 0.17};
  const pmx::OdeControls ctrl;
  for (const bool full : {false, true}) {
    CAPTURE(full);
    const pmx::Matrix<double> sol = pmx::fk_solve(ds.records, theta9, ctrl, full);
    REQUIRE(sol.rows() == 8);
    for (std::size_t i = 3; i < 8; ++i) {
      for (std::size_t j = 0; j < sol.cols(); ++j) {
        CHECK(std::fabs(sol(i, j)) <= ctrl.atol);
      }
    }
    // the kinetic states still evolve
    CHECK(sol(1, 2) > 0.0);
  }
}

TEST_CASE("fk_solve: a strong drug effect depresses circulating counts") {
  std::vector<pmx::EventRecord> recs;
  recs.push_back(dose_rec(1, 0.0, 1200.0, 1, 1));
  for (std::size_t k = 0; k < 6; ++k) {
    recs.push_back(obs_rec(1, 30.0 * (k + 1), 1.0, 8, 2 + k));
  }
  const pmx::Dataset ds = pmx::expand_addl(pmx::make_dataset(recs));
  const std::vector<double> theta9{10.0, 15.0, 35.0, 105.0, 2.5, 125.0, 5.0, 0.2, 0.17};
  const pmx::Matrix<double> sol = pmx::fk_solve(ds.records, theta9, pmx::OdeControls{}, false);
  double lo = 5.0;
  for (std::size_t j = 1; j < sol.cols(); ++j) lo = std::min(lo, sol(7, j) + 5.0);
  CHECK(lo < 4.5);
  CHECK(lo > 0.0);
}

TEST_CASE("validation messages carry the parameter name and the violated bound") {
  const auto m = pmx::make_model("twocpt", single_dose_ds());
  const std::vector<double> neg{-1.0, 15.0, 35.0, 105.0, 2.5, 0.5};
  CHECK_THROWS_WITH_AS(m->validate_constrained(neg),
                       doctest::Contains("CL must be positive"), pmx::ValidationError);

  const auto fk = pmx::make_model("fk_pkpd", fk_ds());
  const double lb = pmx::ka_lower_bound(10.0, 15.0, 35.0, 105.0);
  std::vector<double> bad = kFkMedians;
  bad[4] = 0.5 * lb;
  try {
    fk->unconstrain(bad);
    FAIL("expected a validation error");
  } catch (const pmx::ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("ka must exceed lambda1") != std::string::npos);
    CHECK(msg.find(pmx::format_double(lb)) != std::string::npos);
    CHECK(msg.find(pmx::format_double(0.5 * lb)) != std::string::npos);
  }

  const auto pop = pmx::make_model("twocpt_pop", pop_ds({1, 2}, {{70.0, 25.0, 12.0},
                                                                 {85.0, 18.0, 9.0}}));
  std::vector<double> th{10.0, 15.0, 35.0, 105.0, 2.5, 0.2, 0.2, 0.2, 0.2, 0.2, 0.5,
                         10.0, 15.0, 35.0, 105.0, 2.5, 10.0, 15.0, 35.0, 105.0, 0.1};
  CHECK_THROWS_WITH_AS(pop->validate_constrained(th),
                       doctest::Contains("theta_ka.2 must exceed lambda1"),
                       pmx::ValidationError);
}

TEST_CASE("twocpt_pop with one 70 kg subject reduces to the single-subject model") {
  const pmx::Dataset ds1 = pop_ds({1}, {{70.0, 20.0, 9.0}});
  const auto pop = pmx::make_model("twocpt_pop", ds1);
  const auto single = pmx::make_model("twocpt", ds1);

  const double om = 0.2, sg = 0.5;
  const std::vector<double> pth{10.0, 15.0, 35.0, 105.0, 2.5, om,   om,    om,  om,
                                om,   sg,   10.0, 15.0,  35.0, 105.0, 2.5};
  const std::vector<double> zp = pop->unconstrain(pth);
  const std::vector<double> sth{10.0, 15.0, 35.0, 105.0, 2.5, sg};
  const std::vector<double> zs = single->unconstrain(sth);
  const pmx::LogJointParts pp = pop->log_joint_parts(zp);
  const pmx::LogJointParts ps = single->log_joint_parts(zs);

  // identical kinetics and sigma => identical data likelihood, bit for bit
  CHECK(pp.likelihood == ps.likelihood);

  // population prior adds the omega priors and the subject-level density
  double delta = 0.0;
  for (int p = 0; p < 5; ++p) delta += desk_lognormal(om, 0.25, 0.1);
  const double popv[5] = {10.0, 15.0, 35.0, 105.0, 2.5};
  for (int p = 0; p < 5; ++p) delta += desk_lognormal(popv[p], std::log(popv[p]), om);
  CHECK(pp.prior == doctest::Approx(ps.prior + delta).epsilon(1e-12));

  CHECK(pp.jacobian == doctest::Approx(std::accumulate(zp.begin(), zp.end(), 0.0))
                           .epsilon(1e-13));
  CHECK(ps.jacobian == doctest::Approx(std::accumulate(zs.begin(), zs.end(), 0.0))
                           .epsilon(1e-13));
}

TEST_CASE("twocpt_pop log joint is invariant to subject relabeling") {
  const SubjectBundle P{70.0, 25.0, 12.0}, Q{85.0, 18.0, 9.0}, R{55.0, 30.0, 16.0};
  // A sorts subjects [P, Q, R]; B assigns the same bundles to ids so the
  // sorted order becomes [Q, R, P].
  const auto mA = pmx::make_model("twocpt_pop", pop_ds({1, 2, 3}, {P, Q, R}));
  const auto mB = pmx::make_model("twocpt_pop", pop_ds({3, 1, 2}, {P, Q, R}));

  pmx::Rng rng(31);
  const std::vector<double> zA = mA->draw_init(rng);
  std::vector<double> zB(zA.begin(), zA.begin() + 11);
  const auto block = [&](std::size_t j) {
    return std::vector<double>(zA.begin() + 11 + 5 * j, zA.begin() + 16 + 5 * j);
  };
  for (std::size_t j : {1, 2, 0}) {  // B's sorted subjects are Q, R, P
    const auto b = block(j);
    zB.insert(zB.end(), b.begin(), b.end());
  }
  CHECK(mA->log_joint(zA) == doctest::Approx(mB->log_joint(zB)).epsilon(1e-12));
}

TEST_CASE("generated quantities: log_lik recomputes the observation density") {
  const auto m = pmx::make_model("twocpt", single_dose_ds());
  const std::vector<double> theta{10.0, 15.0, 35.0, 105.0, 2.5, 0.3};

  const pmx::Dataset exp_ds = pmx::expand_addl(single_dose_ds());
  const pmx::TwoCptParams<double> p{10.0, 15.0, 35.0, 105.0, 2.5};
  const pmx::Matrix<double> sol =
      pmx::solve_linear_twocpt<double>(exp_ds.records, p, pmx::DoseControls::defaults(3));

  pmx::Rng rng(77);
  const std::vector<double> gq = m->generated_quantities(theta, rng);
  REQUIRE(gq.size() == m->gq_names().size());
  REQUIRE(m->gq_names().size() == 6);  // 3 log_lik + 3 cObsPred
  const double dvs[3] = {20.0, 15.0, 8.0};
  for (int k = 0; k < 3; ++k) {
    const double chat = sol(1, k + 1) / 35.0;
    CHECK(gq[k] == doctest::Approx(desk_lognormal(dvs[k], std::log(chat), 0.3)).epsilon(1e-12));
    CHECK(gq[3 + k] > 0.0);
  }
}

TEST_CASE("posterior-predictive replicates have lognormal moments") {
  const auto m = pmx::make_model("twocpt", single_dose_ds());
  const std::vector<double> theta{10.0, 15.0, 35.0, 105.0, 2.5, 0.3};

  const pmx::Dataset exp_ds = pmx::expand_addl(single_dose_ds());
  const pmx::Matrix<double> sol = pmx::solve_linear_twocpt<double>(
      exp_ds.records, pmx::TwoCptParams<double>{10.0, 15.0, 35.0, 105.0, 2.5},
      pmx::DoseControls::defaults(3));
  const double log_chat = std::log(sol(1, 1) / 35.0);

  const int n = 4000;
  double sum = 0.0, sumsq = 0.0;
  for (int k = 0; k < n; ++k) {
    pmx::Rng rng(9000, static_cast<std::uint64_t>(k));
    const std::vector<double> dv = m->simulate_dv(theta, rng);
    const double l = std::log(dv[0]);
    sum += l;
    sumsq += l * l;
  }
  const double mean = sum / n;
  const double sd = std::sqrt((sumsq - n * mean * mean) / (n - 1));
  CHECK(std::fabs(mean - log_chat) <= 4.0 * 0.3 / std::sqrt(static_cast<double>(n)));
  CHECK(sd == doctest::Approx(0.3).epsilon(0.06));
}

TEST_CASE("sigma = 0 replicates equal the model prediction exactly") {
  const auto m = pmx::make_model("twocpt", single_dose_ds());
  const std::vector<double> theta{10.0, 15.0, 35.0, 105.0, 2.5, 0.0};
  // sigma = 0 is outside the sampled support but legal for simulation
  CHECK_THROWS_AS(m->validate_constrained(theta), pmx::ValidationError);

  const pmx::Dataset exp_ds = pmx::expand_addl(single_dose_ds());
  const pmx::Matrix<double> sol = pmx::solve_linear_twocpt<double>(
      exp_ds.records, pmx::TwoCptParams<double>{10.0, 15.0, 35.0, 105.0, 2.5},
      pmx::DoseControls::defaults(3));

  pmx::Rng rng(6);
  const std::vector<double> dv = m->simulate_dv(theta, rng);
  REQUIRE(dv.size() == 3);
  for (int k = 0; k < 3; ++k) {
    CHECK(dv[k] == sol(1, k + 1) / 35.0);  // bit-for-bit, not just close
  }
}

TEST_CASE("concentration readings before the first dose stay out of the likelihood") {
  std::vector<pmx::EventRecord> recs;
  recs.push_back(obs_rec(1, 0.0, 0.0, 2, 1));  // pre-dose blank, predicted 0
  recs.push_back(dose_rec(1, 0.0, 1000.0, 1, 2));
  recs.push_back(obs_rec(1, 1.0, 20.0, 2, 3));
  const auto m = pmx::make_model("twocpt", pmx::make_dataset(recs));

  const auto& info = m->obs_info();
  REQUIRE(info.size() == 2);
  CHECK_FALSE(info[0].in_likelihood);
  CHECK(info[1].in_likelihood);
  CHECK(count_prefix(m->gq_names(), "log_lik") == 1);
  CHECK(count_prefix(m->gq_names(), "cObsPred") == 2);

  const std::vector<double> theta{10.0, 15.0, 35.0, 105.0, 2.5, 0.3};
  pmx::Rng rng(8);
  const std::vector<double> gq = m->generated_quantities(theta, rng);
  CHECK(gq[1] == 0.0);  // cObsPred.1: no mass before the first dose
  CHECK(gq[2] > 0.0);   // cObsPred.2
  CHECK(std::isfinite(m->log_joint(m->unconstrain(theta))));
}

TEST_CASE("observations with missing DV are predicted but not scored") {
  std::vector<pmx::EventRecord> recs;
  recs.push_back(dose_rec(1, 0.0, 1000.0, 1, 1));
  recs.push_back(obs_rec(1, 1.0, 20.0, 2, 2));
  pmx::EventRecord missing = obs_rec(1, 2.0, 0.0, 2, 3);
  missing.dv = pmx::kNaN;
  recs.push_back(missing);
  const auto m = pmx::make_model("twocpt", pmx::make_dataset(recs));
  CHECK(count_prefix(m->gq_names(), "log_lik") == 1);
  CHECK(count_prefix(m->gq_names(), "cObsPred") == 2);
  pmx::Rng rng(9);
  const std::vector<double> th{10.0, 15.0, 35.0, 105.0, 2.5, 0.3};
  const std::vector<double> gq = m->generated_quantities(th, rng);
  CHECK(gq[2] > 0.0);  // replicate for the unscored row still exists
}

TEST_CASE("fk_pkpd log joint matches a hand-computed sum at the prior medians") {
  const auto m = pmx::make_model("fk_pkpd", fk_ds());
  const std::vector<double> z = m->unconstrain(kFkMedians);

  const pmx::Dataset exp_ds = pmx::expand_addl(fk_ds());
  const pmx::Matrix<double> sol =
      pmx::fk_solve(exp_ds.records, std::span<const double>(kFkMedians.data(), 9),
                    pmx::OdeControls{}, false);

  double prior = 0.0;
  const double med[9] = {10.0, 15.0, 35.0, 105.0, 2.5, 125.0, 5.0, 3e-4, 0.17};
  const double cv[9] = {0.25, 0.5, 0.25, 0.5, 1.0, 0.2, 0.2, 1.0, 0.2};
  for (int i = 0; i < 9; ++i) prior += desk_lognormal(med[i], std::log(med[i]), cv[i]);
  prior += desk_half_normal(0.5, 1.0) + desk_half_normal(0.3, 1.0);

  // records sorted: [anc@0, dose@0, conc@1, conc@4, anc@72, anc@160]
  double lik = 0.0;
  lik += desk_lognormal(5.1, std::log(sol(7, 0) + 5.0), 0.3);
  lik += desk_lognormal(22.0, std::log(sol(1, 2) / 35.0), 0.5);
  lik += desk_lognormal(11.0, std::log(sol(1, 3) / 35.0), 0.5);
  lik += desk_lognormal(4.2, std::log(sol(7, 4) + 5.0), 0.3);
  lik += desk_lognormal(4.8, std::log(sol(7, 5) + 5.0), 0.3);
  const double jac = std::accumulate(z.begin(), z.end(), 0.0);

  CHECK(m->log_joint(z) == doctest::Approx(prior + lik + jac).epsilon(1e-10));

  CHECK(count_prefix(m->gq_names(), "log_lik") == 5);
  CHECK(count_prefix(m->gq_names(), "cObsPred") == 2);
  CHECK(count_prefix(m->gq_names(), "neutObsPred") == 3);
}

TEST_CASE("prior overrides shift the prior part by the desk-computed amount") {
  const pmx::Dataset ds = single_dose_ds();
  const auto base = pmx::make_model("twocpt", ds);

  pmx::ModelOptions opts;
  opts.priors = {{"cl_median", 12.0}, {"q_sd", 0.8}, {"sigma_sd", 0.5}};
  const auto tuned = pmx::make_model("twocpt", ds, opts);

  const std::vector<double> theta{9.0, 14.0, 30.0, 90.0, 2.0, 0.4};
  const std::vector<double> z = base->unconstrain(theta);
  const auto p0 = base->log_joint_parts(z);
  const auto p1 = tuned->log_joint_parts(z);

  double delta = 0.0;
  delta += desk_lognormal(9.0, std::log(12.0), 0.25) - desk_lognormal(9.0, std::log(10.0), 0.25);
  delta += desk_lognormal(14.0, std::log(15.0), 0.8) - desk_lognormal(14.0, std::log(15.0), 0.5);
  delta += desk_half_normal(0.4, 0.5) - desk_half_normal(0.4, 1.0);
  CHECK(p1.prior - p0.prior == doctest::Approx(delta).epsilon(1e-12));
  CHECK(p1.likelihood == p0.likelihood);
  CHECK(p1.jacobian == p0.jacobian);
}

TEST_CASE("prior overrides: population omega location and fk scales") {
  const pmx::Dataset pds = pop_ds({1}, {{70.0, 20.0, 9.0}});
  const auto pop0 = pmx::make_model("twocpt_pop", pds);
  pmx::ModelOptions popts;
  popts.priors = {{"omega_mu", -1.0}, {"omega_sd", 0.2}};
  const auto pop1 = pmx::make_model("twocpt_pop", pds, popts);
  std::vector<double> th{10.0, 15.0, 35.0, 105.0, 2.5, 0.2, 0.25, 0.3, 0.35, 0.4, 0.5,
                         11.0, 16.0, 36.0, 106.0, 3.0};
  const std::vector<double> z = pop0->unconstrain(th);
  const auto q0 = pop0->log_joint_parts(z);
  const auto q1 = pop1->log_joint_parts(z);
  double delta = 0.0;
  for (int p = 0; p < 5; ++p) {
    const double om = th[5 + p];
    delta += desk_lognormal(om, -1.0, 0.2) - desk_lognormal(om, 0.25, 0.1);
  }
  CHECK(q1.prior - q0.prior == doctest::Approx(delta).epsilon(1e-12));
  CHECK(q1.likelihood == q0.likelihood);

  pmx::ModelOptions fopts;
  fopts.priors = {{"v1_median", 40.0}, {"sigma_neut_sd", 2.0}};
  const auto fk0 = pmx::make_model("fk_pkpd", fk_ds());
  const auto fk1 = pmx::make_model("fk_pkpd", fk_ds(), fopts);
  const std::vector<double> zf = fk0->unconstrain(kFkMedians);
  const auto f0 = fk0->log_joint_parts(zf);
  const auto f1 = fk1->log_joint_parts(zf);
  double fd = 0.0;
  fd += desk_lognormal(35.0, std::log(40.0), 0.25) - desk_lognormal(35.0, std::log(35.0), 0.25);
  fd += desk_half_normal(kFkMedians[10], 2.0) - desk_half_normal(kFkMedians[10], 1.0);
  CHECK(f1.prior - f0.prior == doctest::Approx(fd).epsilon(1e-12));
}

TEST_CASE("prior overrides reject unknown keys and non-positive values") {
  pmx::ModelOptions opts;
  opts.priors = {{"vq_median", 1.0}};
  CHECK_THROWS_WITH_AS(pmx::make_model("twocpt", single_dose_ds(), opts),
                       doctest::Contains("unknown prior override 'vq_median'"),
                       pmx::ValidationError);

  // The one-compartment model has no vp parameter.
  opts.priors = {{"vp_median", 100.0}};
  CHECK_THROWS_AS(pmx::make_model("onecpt", single_dose_ds(), opts), pmx::ValidationError);

  opts.priors = {{"cl_sd", -0.25}};
  CHECK_THROWS_WITH_AS(pmx::make_model("twocpt", single_dose_ds(), opts),
                       doctest::Contains("must be positive"), pmx::ValidationError);
}

TEST_CASE("unknown model names are rejected with the list of built-ins") {
  const pmx::Dataset ds = single_dose_ds();
  CHECK_THROWS_WITH_AS(pmx::make_model("threecpt", ds),
                       doctest::Contains("unknown model 'threecpt'"), pmx::ValidationError);
  CHECK(pmx::is_builtin_model("twocpt"));
  CHECK_FALSE(pmx::is_builtin_model("threecpt"));
  CHECK(pmx::builtin_model_names().size() == 4);
}

}  // TEST_SUITE
