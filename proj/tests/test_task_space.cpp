#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "lcrl/task_space.hpp"

using namespace lcrl;

namespace {

std::vector<int> set_bits(const MultiHotDescriptor& m) {
  std::vector<int> out;
  for (std::size_t i = 0; i < m.bits.size(); ++i)
    if (m.bits[i] != 0.0f) out.push_back(static_cast<int>(i));
  return out;
}

bool is_permutation_of(const std::vector<TaskDescriptor>& a, const std::vector<TaskDescriptor>& b) {
  std::multiset<int> x, y;
  for (const auto& t : a) x.insert(t.id());
  for (const auto& t : b) y.insert(t.id());
  return x == y;
}

}  // namespace

TEST_CASE("enumeration sizes and order") {
  const auto all = enumerate_tasks();
  REQUIRE(all.size() == 64);
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i].id() == static_cast<int>(i));
  CHECK(enumerate_tasks() == all);

  ComponentDepthSpec one;
  one.values_per_depth = {1, 1, 1};
  CHECK(enumerate_tasks(one).size() == 1);

  ComponentDepthSpec partial;
  partial.values_per_depth = {4, 4, 3};
  const auto sub = enumerate_tasks(partial);
  CHECK(sub.size() == 48);
  CHECK(std::none_of(sub.begin(), sub.end(), [](const auto& t) { return t.dynamics_id == 3; }));

  ComponentDepthSpec bad;
  bad.modules_per_depth = {4, 0, 4};
  CHECK_THROWS_AS(enumerate_tasks(bad), ContractViolation);
  bad = {};
  bad.values_per_depth = {5, 4, 4};
  CHECK_THROWS_AS(enumerate_tasks(bad), ContractViolation);
}

TEST_CASE("multi-hot layout") {
  CHECK(set_bits(descriptor_to_multihot(TaskDescriptor::from_indices(0, 0, 0))) == std::vector<int>{0, 4, 8});
  CHECK(set_bits(descriptor_to_multihot(TaskDescriptor::from_indices(3, 2, 1))) == std::vector<int>{3, 6, 9});

  std::set<std::vector<int>> seen;
  for (const auto& t : enumerate_tasks()) {
    const auto m = descriptor_to_multihot(t);
    CHECK(m.bits.size() == 12);
    CHECK(m.popcount() == 3);
    const auto bits = set_bits(m);
    // One bit per depth block.
    for (int d = 0; d < kNumDepths; ++d) CHECK(bits[static_cast<std::size_t>(d)] / 4 == d);
    seen.insert(bits);
  }
  CHECK(seen.size() == 64);
}

TEST_CASE("random curricula are permutations") {
  const auto all = enumerate_tasks();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const auto c = make_curriculum(all, CurriculumMode::random, rng);
    CHECK(c.ordering.size() == 64);
    CHECK(is_permutation_of(c.ordering, all));
  }
  Rng a(7), b(7);
  CHECK(make_curriculum(all, CurriculumMode::random, a).ordering ==
        make_curriculum(all, CurriculumMode::random, b).ordering);
}

TEST_CASE("random curriculum positions are roughly uniform") {
  const auto all = enumerate_tasks();
  std::vector<int> first(64, 0);
  const int trials = 6400;
  for (int s = 0; s < trials; ++s) {
    Rng rng(static_cast<std::uint64_t>(s) + 1000);
    ++first[static_cast<std::size_t>(make_curriculum(all, CurriculumMode::random, rng).ordering.front().id())];
  }
  double chi2 = 0.0;
  for (int n : first) chi2 += (n - 100.0) * (n - 100.0) / 100.0;
  // 63 degrees of freedom; the 0.999 quantile is about 103.4.
  CHECK(chi2 < 103.4);
}

TEST_CASE("disjoint-first fronts are pairwise disjoint") {
  const auto all = enumerate_tasks();
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const auto c = make_curriculum(all, CurriculumMode::disjoint_first, rng);
    REQUIRE(c.ordering.size() == 64);
    CHECK(is_permutation_of(c.ordering, all));
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j)
        CHECK(tasks_disjoint(c.ordering[static_cast<std::size_t>(i)], c.ordering[static_cast<std::size_t>(j)]));
  }
}

TEST_CASE("disjoint-first on the 2x2x2 space") {
  ComponentDepthSpec tiny;
  tiny.values_per_depth = {2, 2, 2};
  tiny.modules_per_depth = {2, 2, 2};
  const auto tasks = enumerate_tasks(tiny);
  REQUIRE(tasks.size() == 8);

  // Exhaustive oracle: the disjoint pairs are exactly the bitwise complements.
  std::set<std::pair<int, int>> valid;
  for (const auto& a : tasks)
    for (const auto& b : tasks)
      if (a.static_index() + b.static_index() == 1 && a.color_index() + b.color_index() == 1 &&
          a.dynamics_id + b.dynamics_id == 1)
        valid.insert({a.id(), b.id()});
  REQUIRE(valid.size() == 8);

  std::set<std::pair<int, int>> fronts;
  for (std::uint64_t seed = 0; seed < 400; ++seed) {
    Rng rng(seed);
    const auto c = make_curriculum(tasks, CurriculumMode::disjoint_first, rng, tiny);
    CHECK(is_permutation_of(c.ordering, tasks));
    const std::pair<int, int> front{c.ordering[0].id(), c.ordering[1].id()};
    CHECK(valid.count(front) == 1);
    fronts.insert(front);
  }
  // Every complementary ordered pair is reachable.
  CHECK(fronts == valid);
}

TEST_CASE("infeasible disjoint-first is a hard failure") {
  std::vector<TaskDescriptor> same_static;
  for (int c = 0; c < 4; ++c)
    for (int d = 0; d < 4; ++d) same_static.push_back(TaskDescriptor::from_indices(1, c, d));
  Rng rng(0);
  CHECK_THROWS_AS(make_curriculum(same_static, CurriculumMode::disjoint_first, rng), ContractViolation);
  const std::vector<TaskDescriptor> three{TaskDescriptor::from_indices(0, 0, 0), TaskDescriptor::from_indices(1, 1, 1),
                                          TaskDescriptor::from_indices(2, 2, 2)};
  CHECK_THROWS_AS(make_curriculum(three, CurriculumMode::disjoint_first, rng), ContractViolation);
  CHECK_THROWS_AS(make_curriculum({}, CurriculumMode::random, rng), ContractViolation);
}

TEST_CASE("curriculum text round trip") {
  Rng rng(3);
  const auto c = make_curriculum(enumerate_tasks(), CurriculumMode::disjoint_first, rng);
  const std::string text = serialize_curriculum(c);
  const auto back = parse_curriculum(text, CurriculumMode::disjoint_first);
  CHECK(back.ordering == c.ordering);
  CHECK(serialize_curriculum(back) == text);
  CHECK(parse_curriculum("# comment\nwall/red/0\n\nfood/blue/3\n").ordering.size() == 2);
  CHECK_THROWS(parse_curriculum("wall/orange/0\n"));
  CHECK(parse_curriculum_mode("random") == CurriculumMode::random);
  CHECK_THROWS_AS(parse_curriculum_mode("sorted"), ContractViolation);
}
