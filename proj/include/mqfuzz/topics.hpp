#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "mqfuzz/bytes.hpp"

// Topic names, topic filters and wildcard matching (MQTT 3.1.1 rules).
namespace mqfuzz::topics {

/// Forced by the 16-bit length prefix of MQTT strings.
inline constexpr std::size_t kMaxLength = 65535;

/// "a/#" matches "a". Named so reports can point at brokers that disagree.
inline constexpr bool kHashMatchesParentLevel = true;

enum class Violation {
    Empty,
    InvalidUtf8,
    Overlength,
    ContainsNul,
    WildcardInTopic,
    HashNotLast,
    HashNotWholeLevel,
    PlusNotWholeLevel,
};

std::string_view describe(Violation v);

/// Every rule a publish topic name breaks; empty when valid.
std::vector<Violation> validate_topic(ByteView topic);

/// Every rule a subscription filter breaks; empty when valid.
std::vector<Violation> validate_filter(ByteView filter);

inline bool is_valid_topic(ByteView t) { return validate_topic(t).empty(); }
inline bool is_valid_filter(ByteView f) { return validate_filter(f).empty(); }

/// Levels separated by '/'. "a//b" has three levels, "/a" has two.
std::vector<ByteView> split_levels(ByteView name);

/// Level-by-level match. '+' matches exactly one level (possibly empty),
/// '#' matches the remaining levels including none. Total on any input;
/// results for invalid filters or topics carry no meaning.
bool match_filter(ByteView filter, ByteView topic);

}  // namespace mqfuzz::topics
