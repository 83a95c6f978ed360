#include "dkv/common.hpp"

#include <iterator>
#include <numeric>
#include <sstream>

namespace dkv::positions {

PositionList range(Position begin, Position end) {
  PositionList out;
  if (end > begin) {
    out.resize(static_cast<std::size_t>(end - begin));
    std::iota(out.begin(), out.end(), begin);
  }
  return out;
}

bool is_set(std::span<const Position> list) {
  return std::adjacent_find(list.begin(), list.end(),
                            [](Position a, Position b) { return a >= b; }) == list.end();
}

bool contains(std::span<const Position> sorted, Position p) {
  return std::binary_search(sorted.begin(), sorted.end(), p);
}

PositionList sorted_copy(std::span<const Position> list) {
  PositionList out(list.begin(), list.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

PositionList set_union(std::span<const Position> a, std::span<const Position> b) {
  PositionList out;
  out.reserve(a.size() + b.size());
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

PositionList set_difference(std::span<const Position> a, std::span<const Position> b) {
  PositionList out;
  out.reserve(a.size());
  std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

PositionList set_intersection(std::span<const Position> a, std::span<const Position> b) {
  PositionList out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

bool is_subset(std::span<const Position> a, std::span<const Position> b) {
  return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

bool is_permutation_of_range(std::span<const Position> list, Position n) {
  if (static_cast<Position>(list.size()) != n) return false;
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  for (Position p : list) {
    if (p < 0 || p >= n || seen[static_cast<std::size_t>(p)]) return false;
    seen[static_cast<std::size_t>(p)] = true;
  }
  return true;
}

std::string to_string(std::span<const Position> list) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < list.size(); ++i) {
    if (i) os << ',';
    os << list[i];
  }
  os << ']';
  return os.str();
}

}  // namespace dkv::positions
