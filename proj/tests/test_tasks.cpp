#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "uniso/error.hpp"
#include "uniso/tasks.hpp"

using namespace uniso;
using namespace uniso::tasks;

namespace {

TaskSpec find(const std::vector<TaskSpec>& s, const std::string& id) {
  for (const auto& t : s)
    if (t.id == id) return t;
  throw std::runtime_error("no task " + id);
}

}  // namespace

TEST_CASE("builtin suite composition") {
  const auto suite = builtin_suite();
  REQUIRE(suite.size() == 6);
  std::set<std::string> ids;
  bool cont = false, cat = false;
  for (const auto& t : suite) {
    CHECK_NOTHROW(t.validate());
    ids.insert(t.id);
    cont |= t.space.all_continuous();
    cat |= t.space.all_categorical();
    CHECK(!t.meta.name.empty());
    CHECK(!t.meta.description.empty());
    CHECK(t.meta.objective == "max");
    CHECK(t.y_min < t.y_max);
  }
  CHECK(ids.size() == 6);
  CHECK(cont);
  CHECK(cat);
  CHECK(find(suite, "Sphere8").space.dim() == 8);
  CHECK(find(suite, "Rastrigin5").space.dim() == 5);
  CHECK(find(suite, "Levy10").space.dim() == 10);
  CHECK(find(suite, "OneMax12").space.variables()[0].categories == 2);
  CHECK(find(suite, "SeqMatch8").space.variables()[0].categories == 4);
}

TEST_CASE("analytic optima") {
  const auto suite = builtin_suite();
  CHECK(find(suite, "Sphere8").oracle(Design(8, 0.0)) == 0.0);
  CHECK(find(suite, "Rastrigin5").oracle(Design(5, 0.0)) == doctest::Approx(0.0).scale(1e-12));
  CHECK(find(suite, "Levy10").oracle(Design(10, 1.0)) == doctest::Approx(0.0).scale(1e-12));
  CHECK(find(suite, "OneMax12").oracle(Design(12, 1.0)) == 12.0);
  const auto& sm = find(suite, "SeqMatch8");
  CHECK(sm.oracle(sm.planted) == 8.0);
  CHECK(find(suite, "SphereShift8").oracle(Design(8, 0.3)) == doctest::Approx(0.0).scale(1e-12));
  for (const auto& t : suite) CHECK(t.optimum() >= t.y_max);

  // Independent check of the remaining base functions at known points.
  for (const auto& t : heldout_suite()) {
    Design at(t.space.dim());
    for (std::size_t i = 0; i < at.size(); ++i) {
      const double base = t.function == "styblinski_tang" ? -2.903534027771178 : 0.0;
      at[i] = base + t.transform.shift[i];
    }
    const bool inside = std::all_of(at.begin(), at.end(), [&](double v) {
      return v >= t.space.variables()[0].lo && v <= t.space.variables()[0].hi;
    });
    if (inside) CHECK(t.oracle(at) == doctest::Approx(t.optimum()).scale(1e-9));
  }
}

TEST_CASE("styblinski-tang reference value") {
  TaskSpec base = find(heldout_suite(), "StyblinskiTang5-T103");
  base.transform = {};
  // -39.16616570377142 per dimension at the minimizer, negated.
  CHECK(base.optimum() == doctest::Approx(5 * 39.16616570377142).epsilon(1e-12));
  CHECK(base.oracle(Design(5, 0.0)) == 0.0);
}

TEST_CASE("oracle purity and validation") {
  const auto suite = builtin_suite();
  std::mt19937_64 rng(3);
  for (const auto& t : suite) {
    const Design x = sample_design(t.space, rng);
    CHECK(t.oracle(x) == t.oracle(x));
    Design bad = x;
    bad.push_back(0.0);
    CHECK_THROWS_AS(t.oracle(bad), DomainError);
  }
  Design out(8, 0.0);
  out[0] = 6.0;
  CHECK_THROWS_AS(find(suite, "Sphere8").oracle(out), DomainError);
  Design notcat(12, 1.0);
  notcat[3] = 0.5;
  CHECK_THROWS_AS(find(suite, "OneMax12").oracle(notcat), DomainError);
}

TEST_CASE("transform identity, scaling and translation") {
  const auto suite = builtin_suite();
  const auto& sphere = find(suite, "Sphere8");
  const auto& rast = find(suite, "Rastrigin5");
  std::mt19937_64 rng(5);
  const TaskSpec id = transform_task(rast, 1.0, std::vector<double>(5, 0.0), 9);
  const TaskSpec twice = transform_task(rast, 2.0, {}, 10);
  CHECK(id.id != rast.id);
  CHECK(id.id != twice.id);
  CHECK(id.meta.name != rast.meta.name);
  for (int k = 0; k < 200; ++k) {
    const Design x = sample_design(rast.space, rng);
    CHECK(id.oracle(x) == rast.oracle(x));
    CHECK(twice.oracle(x) == 2.0 * rast.oracle(x));
  }

  std::vector<double> t = {0.5, -1.0, 2.0, 0.0, 1.25, -2.5, 0.1, 4.0};
  const TaskSpec shifted = transform_task(sphere, 1.0, t, 11);
  CHECK(shifted.oracle(t) == 0.0);
  for (int k = 0; k < 200; ++k) {
    Design e = sample_design(sphere.space, rng);
    for (double& v : e) v *= 0.1;
    Design xt = e;
    for (std::size_t i = 0; i < 8; ++i) xt[i] += t[i];
    CHECK(shifted.oracle(xt) == doctest::Approx(sphere.oracle(e)).epsilon(1e-12));
    CHECK(shifted.oracle(xt) <= shifted.oracle(t));
  }
}

TEST_CASE("transform rejections") {
  const auto suite = builtin_suite();
  const auto& sphere = find(suite, "Sphere8");
  CHECK_THROWS_AS(transform_task(sphere, 0.0, {}, 1), DomainError);
  CHECK_THROWS_AS(transform_task(sphere, -1.0, {}, 1), DomainError);
  std::vector<double> far(8, 0.0);
  far[2] = 5.01;
  CHECK_THROWS_AS(transform_task(sphere, 1.0, far, 1), DomainError);
  far[2] = 5.0;
  CHECK_NOTHROW(transform_task(sphere, 1.0, far, 1));
  CHECK_THROWS_AS(transform_task(sphere, 1.0, std::vector<double>(3, 0.0), 1), DomainError);
  std::vector<double> cat(12, 0.0);
  CHECK_NOTHROW(transform_task(find(suite, "OneMax12"), 1.0, cat, 1));
  cat[0] = 0.5;
  CHECK_THROWS_AS(transform_task(find(suite, "OneMax12"), 1.0, cat, 1), DomainError);
}

TEST_CASE("held-out suite") {
  const auto h = heldout_suite();
  REQUIRE(h.size() == 3);
  const auto train = builtin_suite();
  for (const auto& t : h) {
    CHECK_NOTHROW(t.validate());
    CHECK(!t.transform.identity());
    CHECK(t.transform.scale >= 0.5);
    CHECK(t.transform.scale <= 2.0);
    for (const auto& b : train) CHECK(b.function != t.function);
  }
  // Different seeds give distinct tasks.
  const TaskSpec a = random_transform(h[0], 1), b = random_transform(h[0], 2);
  CHECK(a.id != b.id);
  CHECK(!(a.transform == b.transform));
}

TEST_CASE("middle50 band on a ranked pool") {
  std::vector<double> pool(100);
  for (int i = 0; i < 100; ++i) pool[static_cast<std::size_t>(i)] = i + 1;
  std::shuffle(pool.begin(), pool.end(), std::mt19937_64(1));
  const auto keep = middle50_band(pool);
  CHECK(keep.size() == 50);
  for (std::size_t i : keep) {
    CHECK(pool[i] > 25.0);
    CHECK(pool[i] <= 75.0);
  }
  CHECK_THROWS_AS(middle50_band(std::vector<double>(7, 1.0)), DomainError);
}

TEST_CASE("offline dataset generation") {
  const auto suite = builtin_suite();
  for (const auto& t : suite) {
    const auto d = gen_offline_dataset(t, 2000, Protocol::Middle50, 7);
    CHECK(d.size() == 2000);
    CHECK(d.task_id == t.id);
    CHECK(d.best() == *std::max_element(d.scores.begin(), d.scores.end()));
    CHECK(d.best() < t.optimum());
    for (std::size_t i = 0; i < d.size(); ++i) {
      CHECK_NOTHROW(text::validate_design(t.space, d.designs[i]));
      CHECK(t.oracle(d.designs[i]) == d.scores[i]);
    }
    const auto u = gen_offline_dataset(t, 300, Protocol::Uniform, 7);
    CHECK(u.size() == 300);
  }
  const auto& s = find(suite, "Sphere8");
  CHECK_THROWS_AS(gen_offline_dataset(s, 99, Protocol::Middle50, 1), DomainError);
}

TEST_CASE("middle50 keeps the central band of its pool") {
  const auto& t = find(builtin_suite(), "Levy10");
  const auto m = gen_offline_dataset(t, 400, Protocol::Middle50, 3);
  const auto u = gen_offline_dataset(t, 1600, Protocol::Uniform, 3);
  auto sorted = u.scores;
  std::sort(sorted.begin(), sorted.end());
  // Same seed, same draw order: the uniform set is exactly the middle50 pool.
  for (double y : m.scores) {
    CHECK(y > sorted[399]);
    CHECK(y <= sorted[1199]);
  }
}

TEST_CASE("constant oracle is rejected") {
  TaskSpec t = find(builtin_suite(), "SeqMatch8");
  t.planted.assign(8, 9.0);  // no design can match
  CHECK_THROWS_AS(gen_offline_dataset(t, 100, Protocol::Uniform, 1), DomainError);
}

TEST_CASE("generation is reproducible") {
  const auto& t = find(builtin_suite(), "SeqMatch8");
  const auto a = gen_offline_dataset(t, 500, Protocol::Middle50, 42);
  const auto b = gen_offline_dataset(t, 500, Protocol::Middle50, 42);
  const auto c = gen_offline_dataset(t, 500, Protocol::Middle50, 43);
  CHECK(a.designs == b.designs);
  CHECK(a.scores == b.scores);
  CHECK(a.stats == b.stats);
  CHECK(a.designs != c.designs);
}

TEST_CASE("poorest subset") {
  const auto& t = find(builtin_suite(), "Sphere8");
  const auto d = gen_offline_dataset(t, 500, Protocol::Middle50, 1);
  const auto p = d.poorest(100);
  CHECK(p.size() == 100);
  auto sorted = d.scores;
  std::sort(sorted.begin(), sorted.end());
  CHECK(p.best() == sorted[99]);
  for (double y : p.scores) CHECK(y <= sorted[99]);
  CHECK_THROWS_AS(d.poorest(0), DomainError);
  CHECK_THROWS_AS(d.poorest(501), DomainError);
}

TEST_CASE("dataset file round trip") {
  const auto& t = find(builtin_suite(), "Rastrigin5");
  const auto d = gen_offline_dataset(t, 150, Protocol::Middle50, 2);
  std::stringstream ss;
  write_dataset(ss, d);
  const auto r = read_dataset(ss);
  CHECK(r.task_id == d.task_id);
  CHECK(r.designs == d.designs);
  CHECK(r.scores == d.scores);
  CHECK(r.stats == d.stats);
  CHECK(r.seed == d.seed);
  CHECK(r.protocol == d.protocol);

  std::stringstream no_trailer("{\"task\":\"a\",\"x\":[1],\"y\":2}\n");
  CHECK_THROWS_AS(read_dataset(no_trailer), FormatError);
  std::stringstream broken("{\"task\":\"a\",\"x\":[1]\n");
  CHECK_THROWS_AS(read_dataset(broken), FormatError);
}

TEST_CASE("suite config round trip") {
  const SuiteConfig s = default_suite_config();
  const nlohmann::json j = s;
  const SuiteConfig r = j.get<SuiteConfig>();
  REQUIRE(r.tasks.size() == s.tasks.size());
  REQUIRE(r.heldout.size() == s.heldout.size());
  std::mt19937_64 rng(9);
  for (std::size_t i = 0; i < s.tasks.size(); ++i) {
    CHECK(r.tasks[i].id == s.tasks[i].id);
    CHECK(r.tasks[i].transform == s.tasks[i].transform);
    CHECK(r.tasks[i].y_min == s.tasks[i].y_min);
    for (int k = 0; k < 20; ++k) {
      const Design x = sample_design(s.tasks[i].space, rng);
      CHECK(r.tasks[i].oracle(x) == s.tasks[i].oracle(x));
    }
  }
  CHECK(nlohmann::json(r).dump() == j.dump());
  nlohmann::json bad = j;
  bad["tasks"][0]["kind"] = "mixed";
  CHECK_THROWS_AS(bad.get<SuiteConfig>(), FormatError);
}
