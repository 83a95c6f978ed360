#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace dkv {

using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<float, 1, Eigen::Dynamic>;

using TokenId = std::int32_t;
using Position = std::int32_t;

/// Ordered list of sequence positions. When used as a set it is kept sorted
/// and duplicate-free; when used as a layout its order is the storage order.
using PositionList = std::vector<Position>;

namespace positions {

PositionList range(Position begin, Position end);
bool is_set(std::span<const Position> list);
bool contains(std::span<const Position> sorted, Position p);
PositionList sorted_copy(std::span<const Position> list);
PositionList set_union(std::span<const Position> a, std::span<const Position> b);
PositionList set_difference(std::span<const Position> a, std::span<const Position> b);
PositionList set_intersection(std::span<const Position> a, std::span<const Position> b);
bool is_subset(std::span<const Position> a, std::span<const Position> b);

/// True when `list` holds every position in [0, n) exactly once.
bool is_permutation_of_range(std::span<const Position> list, Position n);

std::string to_string(std::span<const Position> list);

}  // namespace positions

}  // namespace dkv
