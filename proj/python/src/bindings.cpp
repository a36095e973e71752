// Thin pybind11 layer over the core library. Structured results cross the
// boundary as JSON so the Python side sees plain dicts and lists.

#include "ctimp/asset_inventory.hpp"
#include "ctimp/selfheal.hpp"
#include "ctimp/sigma_compiler.hpp"
#include "ctimp/stix_pattern.hpp"

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using nlohmann::json;

namespace {

py::object to_python(const json& j) {
    return py::module_::import("json").attr("loads")(j.dump());
}

json expr_json(const ctimp::ingest::ObservableExpr& e) {
    using Op = ctimp::ingest::ObservableExpr::Op;
    if (e.op() == Op::leaf)
        return {{"op", "leaf"}, {"kind", ctimp::ingest::to_string(e.observable().kind)}, {"value", e.observable().value}};
    json children = json::array();
    for (const auto& c : e.children()) children.push_back(expr_json(c));
    return {{"op", e.op() == Op::all_of ? "and" : "or"}, {"children", children}};
}

}  // namespace

PYBIND11_MODULE(_ctimp, m) {
    m.doc() = "ctimp core bindings";

    // PatternError carries (message, offset) in args; ValidationError carries
    // (message, path or None, offending ids).
    static py::exception<ctimp::ingest::PatternError> pattern_error(m, "PatternError", PyExc_ValueError);
    static py::exception<ctimp::assets::SchemaError> validation_error(m, "ValidationError", PyExc_ValueError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const ctimp::ingest::PatternError& e) {
            PyErr_SetObject(pattern_error.ptr(), py::make_tuple(e.what(), e.offset()).ptr());
        } catch (const ctimp::assets::SchemaError& e) {
            PyErr_SetObject(validation_error.ptr(), py::make_tuple(e.what(), e.path(), py::list()).ptr());
        } catch (const ctimp::assets::IntegrityError& e) {
            PyErr_SetObject(validation_error.ptr(), py::make_tuple(e.what(), py::none(), e.offending_ids()).ptr());
        }
    });

    m.def(
        "parse_pattern", [](const std::string& text) { return to_python(expr_json(ctimp::ingest::parse_pattern(text))); },
        py::arg("pattern"), "Parse a STIX pattern into a nested dict of and/or/leaf nodes.");

    m.def(
        "render_pattern", [](const std::string& text) { return ctimp::ingest::render_pattern(ctimp::ingest::parse_pattern(text)); },
        py::arg("pattern"), "Canonical rendering of a STIX pattern.");

    m.def(
        "validate_map",
        [](const std::string& document) {
            auto map = ctimp::assets::load_map(document);
            return to_python({{"map_id", map.map_id},
                              {"revision", map.revision},
                              {"nodes", map.nodes.size()},
                              {"edges", map.edges.size()}});
        },
        py::arg("document"), "Validate an asset map JSON document; raises ValidationError.");

    m.def(
        "compile_indicator",
        [](const std::string& stix_id, const std::string& pattern, int trust_tier, const std::string& created,
           std::vector<std::string> labels) {
            ctimp::ingest::IndicatorRecord ind;
            ind.stix_id = stix_id;
            auto ts = ctimp::parse_rfc3339(created);
            if (!ts) throw py::value_error("created is not an RFC 3339 timestamp");
            ind.created = ind.modified = ind.valid_from = *ts;
            ind.pattern_text = pattern;
            ind.expr = ctimp::ingest::parse_pattern(pattern);
            ind.trust_tier = trust_tier;
            ind.labels = std::move(labels);
            auto out = ctimp::sigma::compile_indicator(ind);
            json rules = json::array(), diags = json::array();
            for (const auto& r : out.rules) rules.push_back({{"rule_id", r.rule_id}, {"yaml", ctimp::sigma::render_yaml(r)}});
            for (const auto& d : out.diagnostics) diags.push_back(d.message);
            return to_python({{"rules", rules}, {"diagnostics", diags}});
        },
        py::arg("stix_id"), py::arg("pattern"), py::arg("trust_tier") = 4, py::arg("created") = "2024-06-01T00:00:00Z",
        py::arg("labels") = std::vector<std::string>{},
        "Compile one indicator to SIGMA rules.");

    m.def(
        "decide",
        [](const std::string& policies_document, const std::string& threat_type, const std::string& threat_group) {
            auto store = ctimp::selfheal::load_policy_store(policies_document);
            auto d = ctimp::selfheal::decide(threat_type, threat_group, store);
            py::object id = d.policy ? py::object(py::str(d.policy->policy_id)) : py::object(py::none());
            return py::make_tuple(id, std::string(ctimp::selfheal::to_string(d.matched_by)));
        },
        py::arg("policies"), py::arg("threat_type"), py::arg("threat_group"),
        "Select the healing policy for an alert: (policy_id or None, matched_by).");
}
