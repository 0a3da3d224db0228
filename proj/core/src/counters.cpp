#include "convneur/counters.hpp"

namespace convneur {

namespace {
thread_local CountingSession* active_session = nullptr;
thread_local CostCategory active_category = CostCategory::other;
}  // namespace

std::string_view category_name(CostCategory category) noexcept {
    switch (category) {
        case CostCategory::local:
            return "local";
        case CostCategory::mem_bottleneck:
            return "mem_bottleneck";
        case CostCategory::mem_inner:
            return "mem_inner";
        case CostCategory::mem_chunk:
            return "mem_chunk";
        case CostCategory::fusion:
            return "fusion";
        case CostCategory::other:
            return "other";
    }
    return "unknown";
}

std::uint64_t OpCounts::total() const noexcept {
    std::uint64_t sum = 0;
    for (auto m : macs) {
        sum += m;
    }
    return sum;
}

CountingSession::CountingSession() : previous_(active_session) { active_session = this; }

CountingSession::~CountingSession() { active_session = previous_; }

CostScope::CostScope(CostCategory category) noexcept : previous_(active_category) {
    active_category = category;
}

CostScope::~CostScope() { active_category = previous_; }

void record_macs(std::uint64_t count) {
    if (active_session) {
        active_session->counts_.macs[static_cast<std::size_t>(active_category)] += count;
    }
}

void record_memory_rollout() {
    if (active_session) {
        ++active_session->counts_.memory_rollouts;
    }
}

void record_memory_chunk() {
    if (active_session) {
        ++active_session->counts_.memory_chunks;
    }
}

bool counting_active() noexcept { return active_session != nullptr; }

}  // namespace convneur
