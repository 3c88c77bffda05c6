#pragma once

#include <cstddef>
#include <cstdint>
#include <new>
#include <stdexcept>
#include <string>
#include <vector>

namespace unsr {

// 64-byte aligned allocator. Numeric arenas use it so buffers always land on
// the same alignment; otherwise SIMD kernels can pick different peeling for
// different allocations and identical computations stop being bitwise equal.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlign)));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t(kAlign)); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
  template <class U>
  bool operator!=(const AlignedAllocator<U>&) const {
    return false;
  }
};

using AlignedVec = std::vector<double, AlignedAllocator<double>>;

// Shape/argument mismatches and malformed inputs.
class DimError : public std::invalid_argument {
 public:
  explicit DimError(const std::string& msg) : std::invalid_argument(msg) {}
};

// API misuse (backward before forward, sampling an underfilled buffer, ...).
class UsageError : public std::logic_error {
 public:
  explicit UsageError(const std::string& msg) : std::logic_error(msg) {}
};

// Caller broke an interface contract (unavailable action, all-masked choice).
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Runtime failures: I/O, parse errors, non-finite values, capacity refusals.
class RuntimeError : public std::runtime_error {
 public:
  explicit RuntimeError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace unsr
