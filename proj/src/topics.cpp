#include "mqfuzz/topics.hpp"

#include <algorithm>

namespace mqfuzz::topics {

std::string_view describe(Violation v) {
    switch (v) {
        case Violation::Empty: return "empty";
        case Violation::InvalidUtf8: return "not valid UTF-8";
        case Violation::Overlength: return "longer than 65535 bytes";
        case Violation::ContainsNul: return "contains NUL";
        case Violation::WildcardInTopic: return "wildcard in publish topic";
        case Violation::HashNotLast: return "'#' not final level";
        case Violation::HashNotWholeLevel: return "'#' not a whole level";
        case Violation::PlusNotWholeLevel: return "'+' not a whole level";
    }
    return "unknown";
}

namespace {

void common_checks(ByteView bytes, std::vector<Violation>& out) {
    if (bytes.empty()) out.push_back(Violation::Empty);
    if (!is_valid_utf8(bytes)) out.push_back(Violation::InvalidUtf8);
    if (bytes.size() > kMaxLength) out.push_back(Violation::Overlength);
    if (std::find(bytes.begin(), bytes.end(), std::uint8_t{0}) != bytes.end()) {
        out.push_back(Violation::ContainsNul);
    }
}

}  // namespace

std::vector<Violation> validate_topic(ByteView topic) {
    std::vector<Violation> out;
    common_checks(topic, out);
    if (std::any_of(topic.begin(), topic.end(), [](std::uint8_t c) { return c == '+' || c == '#'; })) {
        out.push_back(Violation::WildcardInTopic);
    }
    return out;
}

std::vector<Violation> validate_filter(ByteView filter) {
    std::vector<Violation> out;
    common_checks(filter, out);
    const auto levels = split_levels(filter);
    bool hash_not_last = false;
    bool hash_partial = false;
    bool plus_partial = false;
    for (std::size_t i = 0; i < levels.size(); ++i) {
        const auto level = levels[i];
        const auto hashes = std::count(level.begin(), level.end(), std::uint8_t{'#'});
        const auto pluses = std::count(level.begin(), level.end(), std::uint8_t{'+'});
        if (hashes > 0) {
            if (level.size() != 1) hash_partial = true;
            if (i + 1 != levels.size()) hash_not_last = true;
        }
        if (pluses > 0 && level.size() != 1) plus_partial = true;
    }
    if (hash_not_last) out.push_back(Violation::HashNotLast);
    if (hash_partial) out.push_back(Violation::HashNotWholeLevel);
    if (plus_partial) out.push_back(Violation::PlusNotWholeLevel);
    return out;
}

std::vector<ByteView> split_levels(ByteView name) {
    std::vector<ByteView> levels;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= name.size(); ++i) {
        if (i == name.size() || name[i] == '/') {
            levels.push_back(name.subspan(start, i - start));
            start = i + 1;
        }
    }
    return levels;
}

bool match_filter(ByteView filter, ByteView topic) {
    // Walk both strings level by level without allocating; the broker calls
    // this once per subscription per publish.
    std::size_t f = 0;
    std::size_t t = 0;
    const std::size_t fn = filter.size();
    const std::size_t tn = topic.size();
    auto level_end = [](ByteView s, std::size_t from) {
        std::size_t i = from;
        while (i < s.size() && s[i] != '/') ++i;
        return i;
    };
    bool topic_done = false;
    while (true) {
        const std::size_t fe = level_end(filter, f);
        const auto flevel = filter.subspan(f, fe - f);
        if (flevel.size() == 1 && flevel[0] == '#') {
            return topic_done ? kHashMatchesParentLevel : true;
        }
        if (topic_done) return false;
        const std::size_t te = level_end(topic, t);
        const auto tlevel = topic.subspan(t, te - t);
        const bool plus = flevel.size() == 1 && flevel[0] == '+';
        if (!plus && !std::equal(flevel.begin(), flevel.end(), tlevel.begin(), tlevel.end())) {
            return false;
        }
        const bool filter_last = fe >= fn;
        const bool topic_last = te >= tn;
        if (filter_last) return topic_last;
        f = fe + 1;
        if (topic_last) {
            topic_done = true;
        } else {
            t = te + 1;
        }
    }
}

}  // namespace mqfuzz::topics
