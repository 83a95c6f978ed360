#include <doctest.h>

#include <set>

#include "dkv/common.hpp"
#include "dkv/rng.hpp"

using namespace dkv;

TEST_CASE("range and set predicates") {
  CHECK(positions::range(2, 5) == PositionList{2, 3, 4});
  CHECK(positions::range(3, 3).empty());
  CHECK(positions::is_set(PositionList{1, 2, 7}));
  CHECK_FALSE(positions::is_set(PositionList{1, 1, 2}));
  CHECK_FALSE(positions::is_set(PositionList{3, 2}));
  CHECK(positions::contains(PositionList{1, 4, 9}, 4));
  CHECK_FALSE(positions::contains(PositionList{1, 4, 9}, 5));
  CHECK(positions::is_permutation_of_range(PositionList{2, 0, 1}, 3));
  CHECK_FALSE(positions::is_permutation_of_range(PositionList{2, 0, 0}, 3));
  CHECK_FALSE(positions::is_permutation_of_range(PositionList{0, 1}, 3));
  CHECK(positions::to_string(PositionList{1, 2}) == "[1,2]");
}

TEST_CASE("set algebra matches std::set on random inputs") {
  Rng rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    std::set<Position> a, b;
    for (int i = 0; i < 20; ++i) {
      if (rng.uniform() < 0.5) a.insert(static_cast<Position>(rng.below(40)));
      if (rng.uniform() < 0.5) b.insert(static_cast<Position>(rng.below(40)));
    }
    const PositionList la(a.begin(), a.end()), lb(b.begin(), b.end());
    std::set<Position> u = a, d, in;
    u.insert(b.begin(), b.end());
    for (Position p : a) (b.count(p) ? in : d).insert(p);
    CHECK(positions::set_union(la, lb) == PositionList(u.begin(), u.end()));
    CHECK(positions::set_difference(la, lb) == PositionList(d.begin(), d.end()));
    CHECK(positions::set_intersection(la, lb) == PositionList(in.begin(), in.end()));
    CHECK(positions::is_subset(PositionList(in.begin(), in.end()), la));
  }
}

TEST_CASE("sorted_copy removes duplicates") {
  CHECK(positions::sorted_copy(PositionList{5, 1, 5, 3}) == PositionList{1, 3, 5});
}
