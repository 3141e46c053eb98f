#include "psteer/audit.hpp"

#include <mutex>

namespace psteer::audit {

namespace {

struct State {
    std::mutex mutex;
    bool enabled = false;
    std::string phase;
    std::vector<Event> opens;
    std::vector<Event> truths;
};

State& state() {
    static State s;
    return s;
}

} // namespace

void enable(bool on) {
    auto& s = state();
    std::lock_guard lock(s.mutex);
    s.enabled = on;
}

bool enabled() {
    auto& s = state();
    std::lock_guard lock(s.mutex);
    return s.enabled;
}

void reset() {
    auto& s = state();
    std::lock_guard lock(s.mutex);
    s.phase.clear();
    s.opens.clear();
    s.truths.clear();
}

void set_phase(const std::string& phase) {
    auto& s = state();
    std::lock_guard lock(s.mutex);
    s.phase = phase;
}

void record_file_open(const std::string& path) {
    auto& s = state();
    std::lock_guard lock(s.mutex);
    if (s.enabled) {
        s.opens.push_back({s.phase, path});
    }
}

void record_truth_parse(const std::string& path) {
    auto& s = state();
    std::lock_guard lock(s.mutex);
    if (s.enabled) {
        s.truths.push_back({s.phase, path});
    }
}

std::vector<Event> file_opens() {
    auto& s = state();
    std::lock_guard lock(s.mutex);
    return s.opens;
}

std::vector<Event> truth_parses() {
    auto& s = state();
    std::lock_guard lock(s.mutex);
    return s.truths;
}

std::size_t truth_parse_count(const std::string& phase) {
    auto& s = state();
    std::lock_guard lock(s.mutex);
    std::size_t n = 0;
    for (const auto& e : s.truths) {
        if (e.phase == phase) {
            ++n;
        }
    }
    return n;
}

} // namespace psteer::audit
