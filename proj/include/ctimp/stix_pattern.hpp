// ctimp/stix_pattern.hpp - observable expressions and the supported STIX patterning subset
//
// Grammar accepted by parse_pattern:
//
//   pattern    := '[' disjunct ']'
//   disjunct   := conjunct ( 'OR' conjunct )*
//   conjunct   := primary ( 'AND' primary )*
//   primary    := '(' disjunct ')' | path '=' string | path 'IN' '(' string ( ',' string )* ')'
//   path       := ipv4-addr:value | domain-name:value | url:value
//               | file:hashes.MD5 | file:hashes.'SHA-256'
//
// AND binds tighter than OR. Anything else in the STIX patterning language
// (other comparators, qualifiers, multiple observations) is rejected as an
// unsupported construct.

#pragma once

#include "ctimp/common.hpp"

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace ctimp::ingest {

enum class ObservableKind { ipv4, domain, url, md5, sha256, other };

std::string_view to_string(ObservableKind kind);

/// STIX object path for a kind ("ipv4-addr:value", "file:hashes.MD5", ...).
std::string_view object_path(ObservableKind kind);

/// True for kinds whose relevance does not depend on the asset topology.
constexpr bool is_host_agnostic(ObservableKind kind) {
    return kind == ObservableKind::md5 || kind == ObservableKind::sha256;
}

struct Observable {
    ObservableKind kind = ObservableKind::other;
    std::string value;
    std::string object_path;

    friend bool operator==(const Observable&, const Observable&) = default;
    friend auto operator<=>(const Observable&, const Observable&) = default;
};

class ObservableExpr {
public:
    enum class Op { leaf, all_of, any_of };

    static ObservableExpr leaf(Observable obs);
    static ObservableExpr all_of(std::vector<ObservableExpr> children);
    static ObservableExpr any_of(std::vector<ObservableExpr> children);

    Op op() const { return op_; }
    bool is_leaf() const { return op_ == Op::leaf; }
    const Observable& observable() const { return leaf_; }
    const std::vector<ObservableExpr>& children() const { return children_; }

    /// Leaves in left-to-right order.
    std::vector<Observable> leaves() const;
    std::size_t depth() const;

    /// Evaluates with a per-leaf predicate.
    template <typename Pred>
    bool evaluate(Pred&& pred) const {
        switch (op_) {
            case Op::leaf:
                return pred(leaf_);
            case Op::all_of:
                for (const auto& c : children_)
                    if (!c.evaluate(pred)) return false;
                return true;
            case Op::any_of:
                for (const auto& c : children_)
                    if (c.evaluate(pred)) return true;
                return false;
        }
        return false;
    }

    friend bool operator==(const ObservableExpr&, const ObservableExpr&) = default;

private:
    Op op_ = Op::leaf;
    Observable leaf_;
    std::vector<ObservableExpr> children_;
};

class PatternError : public Error {
public:
    enum class Kind { syntax, unsupported, invalid_value };

    PatternError(Kind kind, std::size_t offset, std::string construct, const std::string& message);

    Kind kind() const { return kind_; }
    std::size_t offset() const { return offset_; }
    /// For unsupported constructs, the offending token or path.
    const std::string& construct() const { return construct_; }

private:
    Kind kind_;
    std::size_t offset_;
    std::string construct_;
};

/// Validates and canonicalizes a raw value for the given kind. Throws
/// PatternError(invalid_value) on malformed hashes or addresses.
std::string canonical_value(ObservableKind kind, std::string_view raw);

Observable make_observable(ObservableKind kind, std::string_view raw);

/// Canonical values and flattened same-operator nesting; single-child
/// groups collapse to the child.
ObservableExpr canonical(const ObservableExpr& expr);

ObservableExpr parse_pattern(std::string_view pattern_text);

/// Renders an expression as a pattern that parse_pattern accepts.
std::string render_pattern(const ObservableExpr& expr);

/// Escapes a value for a STIX single-quoted string literal.
std::string quote_stix_string(std::string_view value);

}  // namespace ctimp::ingest
