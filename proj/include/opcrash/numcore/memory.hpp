#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string_view>
#include <type_traits>

namespace opcrash::numcore {

/// Purpose tag attached to every tensor allocation.
enum class AllocTag : std::uint8_t {
  kGeneral = 0,
  kAttention,
  kContext,
  kOptimizer,
  kData,
};
inline constexpr std::size_t kAllocTagCount = 5;

std::string_view to_string(AllocTag tag) noexcept;

/// Process-wide logical byte counters, one live/peak pair per tag plus a
/// total. Counts requested bytes, not allocator overhead.
class MemoryTracker {
 public:
  static MemoryTracker& instance() noexcept;

  void on_allocate(AllocTag tag, std::size_t bytes) noexcept;
  void on_release(AllocTag tag, std::size_t bytes) noexcept;

  std::int64_t live(AllocTag tag) const noexcept;
  std::int64_t peak(AllocTag tag) const noexcept;
  std::int64_t live_total() const noexcept;
  std::int64_t peak_total() const noexcept;

  /// Sets every peak to the current live value.
  void reset_peaks() noexcept;

 private:
  MemoryTracker() = default;
  std::array<std::atomic<std::int64_t>, kAllocTagCount> live_{};
  std::array<std::atomic<std::int64_t>, kAllocTagCount> peak_{};
  std::atomic<std::int64_t> live_total_{0};
  std::atomic<std::int64_t> peak_total_{0};
};

/// Tag applied to allocations made by the calling thread.
AllocTag current_alloc_tag() noexcept;

/// RAII override of the calling thread's allocation tag.
class ScopedAllocTag {
 public:
  explicit ScopedAllocTag(AllocTag tag) noexcept;
  ~ScopedAllocTag();
  ScopedAllocTag(const ScopedAllocTag&) = delete;
  ScopedAllocTag& operator=(const ScopedAllocTag&) = delete;

 private:
  AllocTag previous_;
};

struct PeakReport {
  std::array<std::int64_t, kAllocTagCount> peak_bytes{};
  std::int64_t peak_total = 0;

  std::int64_t operator[](AllocTag tag) const noexcept {
    return peak_bytes[static_cast<std::size_t>(tag)];
  }
};

/// Measures peak bytes above the live level at construction. Resets the
/// tracker's peaks, so scopes must not overlap.
class PeakScope {
 public:
  PeakScope() noexcept;
  PeakReport report() const noexcept;

 private:
  std::array<std::int64_t, kAllocTagCount> baseline_{};
  std::int64_t baseline_total_ = 0;
};

/// std::allocator wrapper that reports to MemoryTracker under the tag that
/// was current when the allocator was constructed.
template <typename T>
class TrackedAllocator {
 public:
  using value_type = T;
  using propagate_on_container_move_assignment = std::true_type;
  using propagate_on_container_swap = std::true_type;
  using propagate_on_container_copy_assignment = std::false_type;
  using is_always_equal = std::false_type;

  TrackedAllocator() noexcept : tag_(current_alloc_tag()) {}
  template <typename U>
  TrackedAllocator(const TrackedAllocator<U>& other) noexcept : tag_(other.tag()) {}

  T* allocate(std::size_t n) {
    T* p = std::allocator<T>{}.allocate(n);
    MemoryTracker::instance().on_allocate(tag_, n * sizeof(T));
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    MemoryTracker::instance().on_release(tag_, n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }

  TrackedAllocator select_on_container_copy_construction() const noexcept {
    return TrackedAllocator{};
  }

  AllocTag tag() const noexcept { return tag_; }

  template <typename U>
  bool operator==(const TrackedAllocator<U>& other) const noexcept {
    return tag_ == other.tag();
  }

 private:
  AllocTag tag_;
};

}  // namespace opcrash::numcore
