// ctimp/common.hpp - shared primitives: timestamps, identifiers, address parsing, errors

#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ctimp {

// ============================================================================
// Errors
// ============================================================================

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Lookup of an entity id that does not exist.
class NotFound : public Error {
public:
    explicit NotFound(const std::string& what) : Error(what + " not found") {}
};

/// A lifecycle change not allowed from the entity's current state.
class IllegalTransition : public Error {
public:
    IllegalTransition(std::string entity_id, std::string from, std::string to)
        : Error("illegal transition for " + entity_id + ": " + from + " -> " + to),
          entity_id_(std::move(entity_id)),
          from_(std::move(from)),
          to_(std::move(to)) {}

    const std::string& entity_id() const { return entity_id_; }
    const std::string& from() const { return from_; }
    const std::string& to() const { return to_; }

private:
    std::string entity_id_;
    std::string from_;
    std::string to_;
};

// ============================================================================
// Time
// ============================================================================

using Timestamp = std::chrono::sys_time<std::chrono::milliseconds>;

/// Parses an RFC 3339 timestamp ("2024-01-02T03:04:05Z", optional fraction
/// and numeric offset). Returns nullopt on malformed input.
std::optional<Timestamp> parse_rfc3339(std::string_view text);

/// Formats as "YYYY-MM-DDTHH:MM:SS.mmmZ".
std::string format_rfc3339(Timestamp ts);

/// "YYYY-MM-DD" in UTC.
std::string format_date(Timestamp ts);

Timestamp now_utc();

inline Timestamp from_unix_seconds(std::int64_t s) {
    return Timestamp{std::chrono::seconds{s}};
}

// ============================================================================
// UUID
// ============================================================================

struct Uuid {
    std::array<std::uint8_t, 16> bytes{};

    std::string str() const;
    static std::optional<Uuid> parse(std::string_view text);
    friend bool operator==(const Uuid&, const Uuid&) = default;
    friend auto operator<=>(const Uuid&, const Uuid&) = default;
};

/// Random (version 4) UUID.
Uuid uuid_v4();

/// Name-based (version 5, SHA-1) UUID.
Uuid uuid_v5(const Uuid& ns, std::string_view name);

// ============================================================================
// Text helpers
// ============================================================================

std::string to_lower(std::string_view s);
std::string trim(std::string_view s);
bool is_hex(std::string_view s);

/// Strict dotted-quad parse. Rejects leading zeros, empty octets and values > 255.
std::optional<std::uint32_t> parse_ipv4(std::string_view text);
bool is_ipv4(std::string_view text);

/// Lowercases and strips one trailing dot.
std::string canonical_domain(std::string_view text);

/// Host component of a URL (scheme optional), lowercased, port and userinfo removed.
/// Empty if none can be identified.
std::string url_host(std::string_view url);

std::vector<std::string> split(std::string_view s, char sep);

}  // namespace ctimp
