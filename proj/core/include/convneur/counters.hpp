#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>

namespace convneur {

// Buckets for multiply-accumulate accounting. Elementwise arithmetic,
// normalization and activations are never counted.
enum class CostCategory : std::size_t {
    local = 0,
    mem_bottleneck,
    mem_inner,
    mem_chunk,
    fusion,
    other,
};

inline constexpr std::size_t kCostCategoryCount = 6;

std::string_view category_name(CostCategory category) noexcept;

struct OpCounts {
    std::array<std::uint64_t, kCostCategoryCount> macs{};
    std::uint64_t memory_rollouts = 0;
    std::uint64_t memory_chunks = 0;

    std::uint64_t operator[](CostCategory c) const noexcept { return macs[static_cast<std::size_t>(c)]; }
    std::uint64_t total() const noexcept;
};

// Activates operation counting on the current thread for its lifetime.
// Sessions nest; only the innermost receives counts.
class CountingSession {
public:
    CountingSession();
    ~CountingSession();
    CountingSession(const CountingSession&) = delete;
    CountingSession& operator=(const CountingSession&) = delete;

    const OpCounts& counts() const noexcept { return counts_; }

private:
    OpCounts counts_;
    CountingSession* previous_;
    friend void record_macs(std::uint64_t);
    friend void record_memory_rollout();
    friend void record_memory_chunk();
};

// Routes MACs recorded on this thread to `category` for its lifetime.
class CostScope {
public:
    explicit CostScope(CostCategory category) noexcept;
    ~CostScope();
    CostScope(const CostScope&) = delete;
    CostScope& operator=(const CostScope&) = delete;

private:
    CostCategory previous_;
};

void record_macs(std::uint64_t count);
void record_memory_rollout();
void record_memory_chunk();
bool counting_active() noexcept;

}  // namespace convneur
