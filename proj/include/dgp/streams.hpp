#pragma once

#include <cstdint>

// Random stream identifiers; each purpose draws from its own generator so
// that changing one consumer never shifts another.
namespace dgp::stream {

inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t batches = 2;
inline constexpr std::uint64_t memory = 3;
inline constexpr std::uint64_t attack = 4;
inline constexpr std::uint64_t similarity = 5;
inline constexpr std::uint64_t task_data = 6;
inline constexpr std::uint64_t tasks = 7;
inline constexpr std::uint64_t synthetic = 8;
inline constexpr std::uint64_t defense = 9;

}  // namespace dgp::stream
