#include "opcrash/numcore/memory.hpp"

namespace opcrash::numcore {

namespace {

thread_local AllocTag t_current_tag = AllocTag::kGeneral;

void raise_peak(std::atomic<std::int64_t>& peak, std::int64_t value) noexcept {
  std::int64_t seen = peak.load(std::memory_order_relaxed);
  while (value > seen && !peak.compare_exchange_weak(seen, value, std::memory_order_relaxed)) {
  }
}

std::size_t index(AllocTag tag) noexcept { return static_cast<std::size_t>(tag); }

}  // namespace

std::string_view to_string(AllocTag tag) noexcept {
  switch (tag) {
    case AllocTag::kGeneral: return "general";
    case AllocTag::kAttention: return "attention";
    case AllocTag::kContext: return "context";
    case AllocTag::kOptimizer: return "optimizer";
    case AllocTag::kData: return "data";
  }
  return "unknown";
}

MemoryTracker& MemoryTracker::instance() noexcept {
  static MemoryTracker tracker;
  return tracker;
}

void MemoryTracker::on_allocate(AllocTag tag, std::size_t bytes) noexcept {
  const auto b = static_cast<std::int64_t>(bytes);
  const std::int64_t now = live_[index(tag)].fetch_add(b, std::memory_order_relaxed) + b;
  raise_peak(peak_[index(tag)], now);
  const std::int64_t total = live_total_.fetch_add(b, std::memory_order_relaxed) + b;
  raise_peak(peak_total_, total);
}

void MemoryTracker::on_release(AllocTag tag, std::size_t bytes) noexcept {
  const auto b = static_cast<std::int64_t>(bytes);
  live_[index(tag)].fetch_sub(b, std::memory_order_relaxed);
  live_total_.fetch_sub(b, std::memory_order_relaxed);
}

std::int64_t MemoryTracker::live(AllocTag tag) const noexcept {
  return live_[index(tag)].load(std::memory_order_relaxed);
}
std::int64_t MemoryTracker::peak(AllocTag tag) const noexcept {
  return peak_[index(tag)].load(std::memory_order_relaxed);
}
std::int64_t MemoryTracker::live_total() const noexcept {
  return live_total_.load(std::memory_order_relaxed);
}
std::int64_t MemoryTracker::peak_total() const noexcept {
  return peak_total_.load(std::memory_order_relaxed);
}

void MemoryTracker::reset_peaks() noexcept {
  for (std::size_t i = 0; i < kAllocTagCount; ++i) {
    peak_[i].store(live_[i].load(std::memory_order_relaxed), std::memory_order_relaxed);
  }
  peak_total_.store(live_total_.load(std::memory_order_relaxed), std::memory_order_relaxed);
}

AllocTag current_alloc_tag() noexcept { return t_current_tag; }

ScopedAllocTag::ScopedAllocTag(AllocTag tag) noexcept : previous_(t_current_tag) {
  t_current_tag = tag;
}
ScopedAllocTag::~ScopedAllocTag() { t_current_tag = previous_; }

PeakScope::PeakScope() noexcept {
  auto& tracker = MemoryTracker::instance();
  tracker.reset_peaks();
  for (std::size_t i = 0; i < kAllocTagCount; ++i) {
    baseline_[i] = tracker.live(static_cast<AllocTag>(i));
  }
  baseline_total_ = tracker.live_total();
}

PeakReport PeakScope::report() const noexcept {
  const auto& tracker = MemoryTracker::instance();
  PeakReport r;
  for (std::size_t i = 0; i < kAllocTagCount; ++i) {
    r.peak_bytes[i] = tracker.peak(static_cast<AllocTag>(i)) - baseline_[i];
  }
  r.peak_total = tracker.peak_total() - baseline_total_;
  return r;
}

}  // namespace opcrash::numcore
