#include "mqfuzz/oracle.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include "mqfuzz/topics.hpp"

namespace mqfuzz {

using nlohmann::json;

namespace {

struct CodeInfo {
    AnomalyCode code;
    std::string_view name;
    Severity severity;
};

constexpr CodeInfo kCodes[] = {
    {AnomalyCode::LostMessage, "LostMessage", Severity::Warning},
    {AnomalyCode::DuplicateDelivery, "DuplicateDelivery", Severity::Warning},
    {AnomalyCode::ReorderedDelivery, "ReorderedDelivery", Severity::Warning},
    {AnomalyCode::AckBeforePrerequisite, "AckBeforePrerequisite", Severity::Warning},
    {AnomalyCode::LateCompletion, "LateCompletion", Severity::Warning},
    {AnomalyCode::TopicTruncation, "TopicTruncation", Severity::Warning},
    {AnomalyCode::UnexpectedDisconnect, "UnexpectedDisconnect", Severity::DoS},
    {AnomalyCode::BrokerCrash, "BrokerCrash", Severity::DoS},
    {AnomalyCode::OrphanPubrelRejected, "OrphanPubrelRejected", Severity::Warning},
    {AnomalyCode::IdReuseMishandled, "IdReuseMishandled", Severity::Info},
    {AnomalyCode::ProtocolViolationTolerated, "ProtocolViolationTolerated", Severity::Info},
};

const CodeInfo& info(AnomalyCode c) {
    for (const auto& i : kCodes) {
        if (i.code == c) return i;
    }
    return kCodes[0];
}

}  // namespace

Severity severity_of(AnomalyCode code) { return info(code).severity; }
std::string_view to_string(AnomalyCode code) { return info(code).name; }

std::string_view to_string(Severity s) {
    switch (s) {
        case Severity::Info: return "info";
        case Severity::Warning: return "warning";
        case Severity::DoS: return "dos";
        case Severity::Critical: return "critical";
    }
    return "info";
}

std::optional<AnomalyCode> anomaly_code_from_string(std::string_view text) {
    for (const auto& i : kCodes) {
        if (i.name == text) return i.code;
    }
    return std::nullopt;
}

std::optional<Severity> severity_from_string(std::string_view text) {
    for (Severity s : {Severity::Info, Severity::Warning, Severity::DoS, Severity::Critical}) {
        if (to_string(s) == text) return s;
    }
    return std::nullopt;
}

const std::vector<AnomalyCode>& all_anomaly_codes() {
    static const std::vector<AnomalyCode> codes = [] {
        std::vector<AnomalyCode> v;
        for (const auto& i : kCodes) v.push_back(i.code);
        return v;
    }();
    return codes;
}

bool ScenarioOutcome::has(AnomalyCode code) const {
    return std::any_of(anomalies.begin(), anomalies.end(), [code](const Anomaly& a) { return a.code == code; });
}

std::set<AnomalyCode> ScenarioOutcome::codes() const {
    std::set<AnomalyCode> out;
    for (const auto& a : anomalies) out.insert(a.code);
    return out;
}

namespace {

using Identity = std::pair<Bytes, Bytes>;  // (topic, payload)

struct PublishRecord {
    std::uint64_t seq = 0;
    std::string session;
    Identity id;
    std::uint8_t qos = 0;
    std::optional<std::uint16_t> packet_id;
    bool retransmission = false;  // qos 2 reuse of an id whose handshake is open
    std::optional<std::uint64_t> pubrel_seq;
    std::optional<std::uint64_t> ack_seq;
    std::size_t order = 0;
};

struct IdentityStats {
    std::size_t min = 0;
    std::size_t max = 0;
    bool regular = false;        // published at least once as a new message
    bool retransmitted = false;  // appeared as a qos 2 retransmission
    std::size_t first_order = 0;
    std::vector<std::uint64_t> publish_seqs;
    std::vector<std::uint64_t> completion_seqs;
    std::vector<std::uint64_t> delivery_seqs;
};

std::string label_identity(const Identity& id) {
    return "payload '" + payload_label(id.second) + "' on topic '" + byte_label(id.first) + "'";
}

Anomaly make(AnomalyCode code, std::vector<std::uint64_t> evidence, std::string explanation) {
    std::sort(evidence.begin(), evidence.end());
    evidence.erase(std::unique(evidence.begin(), evidence.end()), evidence.end());
    return Anomaly{code, severity_of(code), std::move(evidence), std::move(explanation)};
}

bool is_close(const TraceEvent& ev) {
    return ev.kind == EventKind::TcpClosedByPeer || ev.kind == EventKind::TcpError;
}

bool is_step_send(const TraceEvent& ev) {
    return ev.kind == EventKind::Sent && ev.origin == SendOrigin::Step;
}

template <class T>
const T* received(const TraceEvent& ev) {
    return ev.kind == EventKind::Received ? std::get_if<T>(&ev.packet) : nullptr;
}

template <class T>
const T* sent_by_step(const TraceEvent& ev) {
    return is_step_send(ev) && !ev.raw ? std::get_if<T>(&ev.packet) : nullptr;
}

}  // namespace

ScenarioOutcome evaluate_trace(const Experiment& e, const Trace& t) {
    if (t.experiment_name != e.name) {
        throw TraceMismatch("trace is for '" + t.experiment_name + "', not '" + e.name + "'");
    }
    ScenarioOutcome o;
    o.experiment_name = e.name;
    o.trace_outcome = t.outcome;
    o.trace_detail = t.outcome_detail;
    const auto& events = t.events;

    // Granted subscriptions: a step SUBSCRIBE plus the SUBACK answering it.
    struct Granted {
        std::string session;
        Bytes filter;
        std::uint64_t seq;
    };
    std::vector<Granted> granted;
    for (std::size_t i = 0; i < events.size(); ++i) {
        const auto* sub = sent_by_step<Subscribe>(events[i]);
        if (!sub) continue;
        for (std::size_t j = i + 1; j < events.size(); ++j) {
            if (events[j].session != events[i].session) continue;
            const auto* ack = received<Suback>(events[j]);
            if (!ack || ack->packet_id != sub->packet_id) continue;
            for (std::size_t k = 0; k < sub->entries.size() && k < ack->return_codes.size(); ++k) {
                if (ack->return_codes[k] != kSubackFailure) {
                    granted.push_back({events[i].session, sub->entries[k].filter, events[j].seq});
                }
            }
            break;
        }
    }
    std::set<std::string> subscriber_sessions;
    for (const auto& g : granted) subscriber_sessions.insert(g.session);

    // Publishes and the handshake state they open or reuse.
    std::vector<PublishRecord> pubs;
    std::map<std::pair<std::string, std::uint16_t>, std::size_t> open_qos2;
    struct PubrelRecord {
        std::uint64_t seq;
        bool orphan;
    };
    std::map<std::pair<std::string, std::uint16_t>, std::vector<PubrelRecord>> pubrels;
    std::map<std::pair<std::string, std::uint16_t>, std::vector<std::uint64_t>> pubcomps;
    for (const auto& ev : events) {
        if (const auto* p = sent_by_step<Publish>(ev)) {
            PublishRecord r;
            r.seq = ev.seq;
            r.session = ev.session;
            r.id = {p->topic, p->payload};
            r.qos = p->qos;
            r.packet_id = p->packet_id;
            r.order = pubs.size();
            if (p->qos == 2 && p->packet_id) {
                const auto key = std::make_pair(ev.session, *p->packet_id);
                if (open_qos2.count(key)) {
                    r.retransmission = true;
                } else {
                    open_qos2[key] = pubs.size();
                }
            }
            pubs.push_back(std::move(r));
        } else if (const auto* rel = sent_by_step<Pubrel>(ev)) {
            const auto key = std::make_pair(ev.session, rel->packet_id);
            auto it = open_qos2.find(key);
            const bool orphan = it == open_qos2.end();
            if (!orphan) {
                pubs[it->second].pubrel_seq = ev.seq;
                open_qos2.erase(it);
            }
            pubrels[key].push_back({ev.seq, orphan});
            o.ack_flow.push_back({ev.session, PacketType::Pubrel, rel->packet_id, ev.seq, true});
        } else if (ev.kind == EventKind::Received) {
            if (const auto* a = std::get_if<Puback>(&ev.packet)) {
                o.ack_flow.push_back({ev.session, PacketType::Puback, a->packet_id, ev.seq, false});
            } else if (const auto* a = std::get_if<Pubrec>(&ev.packet)) {
                o.ack_flow.push_back({ev.session, PacketType::Pubrec, a->packet_id, ev.seq, false});
            } else if (const auto* a = std::get_if<Pubcomp>(&ev.packet)) {
                o.ack_flow.push_back({ev.session, PacketType::Pubcomp, a->packet_id, ev.seq, false});
                pubcomps[{ev.session, a->packet_id}].push_back(ev.seq);
            }
        }
    }

    auto first_ack_after = [&](const std::string& session, std::uint16_t id, std::uint64_t after,
                               std::initializer_list<PacketType> kinds) -> const AckObservation* {
        for (const auto& a : o.ack_flow) {
            if (a.sent || a.session != session || a.packet_id != id || a.seq <= after) continue;
            if (std::find(kinds.begin(), kinds.end(), a.type) != kinds.end()) return &a;
        }
        return nullptr;
    };

    // R1 bounds per identity.
    std::map<Identity, IdentityStats> stats;
    for (auto& p : pubs) {
        std::size_t fanout = 0;
        for (const auto& s : subscriber_sessions) {
            const bool matched = std::any_of(granted.begin(), granted.end(), [&](const Granted& g) {
                return g.session == s && g.seq < p.seq && topics::match_filter(g.filter, p.id.first);
            });
            if (matched) ++fanout;
        }
        auto& st = stats[p.id];
        if (st.publish_seqs.empty()) st.first_order = p.order;
        st.publish_seqs.push_back(p.seq);
        if (p.retransmission) {
            st.retransmitted = true;
            continue;
        }
        st.regular = true;
        bool complete = false;
        if (p.qos == 1 && p.packet_id) {
            if (const auto* a = first_ack_after(p.session, *p.packet_id, p.seq, {PacketType::Puback})) {
                complete = true;
                p.ack_seq = a->seq;
            }
        } else if (p.qos == 2 && p.packet_id && p.pubrel_seq) {
            if (const auto* a =
                    first_ack_after(p.session, *p.packet_id, p.seq, {PacketType::Pubrec, PacketType::Pubcomp})) {
                complete = true;
                p.ack_seq = a->seq;
            }
        }
        if (complete) {
            st.min += fanout;
            st.completion_seqs.push_back(*p.ack_seq);
            if (p.pubrel_seq) st.completion_seqs.push_back(*p.pubrel_seq);
        }
        st.max += fanout;
    }

    // Deliveries, attributed to identities; R5 on the way.
    std::map<std::string, std::vector<const IdentityStats*>> delivery_order;
    std::map<const IdentityStats*, Identity> identity_of;
    for (auto& [id, st] : stats) identity_of[&st] = id;
    for (const auto& ev : events) {
        if (!subscriber_sessions.count(ev.session)) continue;
        const auto* p = received<Publish>(ev);
        if (!p) continue;
        o.delivered.push_back({ev.session, p->topic, p->payload, p->qos, ev.seq});
        IdentityStats* target = nullptr;
        if (auto it = stats.find({p->topic, p->payload}); it != stats.end()) {
            target = &it->second;
        } else {
            for (auto& [id, st] : stats) {
                const bool prefix = id.second == p->payload && p->topic.size() < id.first.size() &&
                                    std::equal(p->topic.begin(), p->topic.end(), id.first.begin());
                if (!prefix) continue;
                target = &st;
                std::vector<std::uint64_t> ev_seqs = st.publish_seqs;
                ev_seqs.push_back(ev.seq);
                o.anomalies.push_back(make(AnomalyCode::TopicTruncation, ev_seqs,
                                           "delivered topic is " + std::to_string(p->topic.size()) +
                                               " bytes, published topic " + std::to_string(id.first.size()) +
                                               " bytes"));
                break;
            }
        }
        if (!target) continue;
        target->delivery_seqs.push_back(ev.seq);
        auto& order = delivery_order[ev.session];
        if (std::find(order.begin(), order.end(), target) == order.end()) order.push_back(target);
    }

    for (const auto& [id, st] : stats) {
        const std::size_t d = st.delivery_seqs.size();
        if (d < st.min) {
            auto ev = st.publish_seqs;
            ev.insert(ev.end(), st.completion_seqs.begin(), st.completion_seqs.end());
            o.anomalies.push_back(make(AnomalyCode::LostMessage, ev,
                                       label_identity(id) + " completed its handshake but was delivered " +
                                           std::to_string(d) + " of " + std::to_string(st.min) + " times"));
        } else if (d > st.max) {
            auto ev = st.publish_seqs;
            ev.insert(ev.end(), st.delivery_seqs.begin(), st.delivery_seqs.end());
            if (st.retransmitted && !st.regular) {
                o.anomalies.push_back(make(AnomalyCode::IdReuseMishandled, ev,
                                           label_identity(id) +
                                               " reused an unreleased qos 2 id and was delivered as a new message"));
            } else {
                o.anomalies.push_back(make(AnomalyCode::DuplicateDelivery, ev,
                                           label_identity(id) + " delivered " + std::to_string(d) +
                                               " times, at most " + std::to_string(st.max) + " expected"));
            }
        }
    }

    // R2: first deliveries follow publish order.
    for (const auto& [session, order] : delivery_order) {
        for (std::size_t i = 1; i < order.size(); ++i) {
            if (order[i]->first_order < order[i - 1]->first_order) {
                std::vector<std::uint64_t> ev = {order[i - 1]->delivery_seqs.front(), order[i]->delivery_seqs.front(),
                                                 order[i - 1]->publish_seqs.front(), order[i]->publish_seqs.front()};
                o.anomalies.push_back(make(AnomalyCode::ReorderedDelivery, ev,
                                           label_identity(identity_of[order[i]]) + " was published before " +
                                               label_identity(identity_of[order[i - 1]]) +
                                               " but delivered after it on session '" + session + "'"));
                break;
            }
        }
    }

    // R3 and R4 per handshake.
    for (const auto& p : pubs) {
        if (p.qos != 2 || !p.packet_id || p.retransmission) continue;
        const auto* first = first_ack_after(p.session, *p.packet_id, p.seq, {PacketType::Pubrec, PacketType::Pubcomp});
        if (first && first->type == PacketType::Pubcomp) {
            o.anomalies.push_back(make(AnomalyCode::AckBeforePrerequisite, {p.seq, first->seq},
                                       "PUBCOMP " + std::to_string(*p.packet_id) + " arrived before PUBREC"));
        }
        if (!p.pubrel_seq) continue;
        const auto* comp = first_ack_after(p.session, *p.packet_id, *p.pubrel_seq, {PacketType::Pubcomp});
        if (!comp) continue;
        const auto& st = stats.at(p.id);
        std::vector<std::uint64_t> early;
        for (auto d : st.delivery_seqs) {
            if (d < comp->seq) early.push_back(d);
        }
        if (!early.empty()) {
            early.push_back(p.seq);
            early.push_back(comp->seq);
            o.anomalies.push_back(make(AnomalyCode::LateCompletion, early,
                                       label_identity(p.id) + " was forwarded before PUBCOMP " +
                                           std::to_string(*p.packet_id) + " reached the publisher"));
        }
    }

    // R7: every orphan PUBREL gets a PUBCOMP. k-th PUBREL pairs with k-th PUBCOMP.
    std::set<std::uint64_t> explained_closes;
    for (const auto& [key, rels] : pubrels) {
        const auto& comps = pubcomps[key];
        for (std::size_t k = 0; k < rels.size(); ++k) {
            if (!rels[k].orphan || k < comps.size()) continue;
            std::vector<std::uint64_t> ev = {rels[k].seq};
            for (const auto& close : events) {
                if (is_close(close) && close.session == key.first && close.seq > rels[k].seq) {
                    ev.push_back(close.seq);
                    explained_closes.insert(close.seq);
                    break;
                }
            }
            o.anomalies.push_back(make(AnomalyCode::OrphanPubrelRejected, ev,
                                       "PUBREL " + std::to_string(key.second) +
                                           " without a pending publish got no PUBCOMP"));
        }
    }

    // R6: disconnects read against the input class.
    std::vector<const TraceEvent*> closes;
    for (const auto& ev : events) {
        if (is_close(ev)) closes.push_back(&ev);
    }
    o.disconnected = !closes.empty();
    if (e.input == InputClass::Conformant) {
        for (const auto* close : closes) {
            if (explained_closes.count(close->seq)) continue;
            bool requested = false;
            std::optional<std::uint64_t> last_step;
            for (const auto& ev : events) {
                if (ev.seq >= close->seq) break;
                if (ev.session != close->session) continue;
                if (ev.kind == EventKind::Connected) requested = false;
                if (is_step_send(ev)) {
                    last_step = ev.seq;
                    requested = std::holds_alternative<Disconnect>(ev.packet);
                }
            }
            if (requested) continue;
            std::vector<std::uint64_t> ev = {close->seq};
            if (last_step) ev.push_back(*last_step);
            o.anomalies.push_back(make(AnomalyCode::UnexpectedDisconnect, ev,
                                       "broker closed session '" + close->session + "' (" + close->detail +
                                           ") during conformant input"));
        }
    } else if (e.input == InputClass::Malformed && closes.empty()) {
        std::optional<std::uint64_t> last_step;
        for (const auto& ev : events) {
            if (is_step_send(ev)) last_step = ev.seq;
        }
        if (last_step) {
            o.anomalies.push_back(make(AnomalyCode::ProtocolViolationTolerated, {*last_step},
                                       "malformed input did not cause a disconnect"));
        }
    }
    return o;
}

void apply_liveness(ScenarioOutcome& o, const Experiment& e, const Liveness& after) {
    if (after.alive) return;
    std::erase_if(o.anomalies, [](const Anomaly& a) { return a.code == AnomalyCode::UnexpectedDisconnect; });
    o.anomalies.push_back(make(AnomalyCode::BrokerCrash, {},
                               "liveness probe failed after '" + e.name + "': " + after.detail));
}

std::string payload_label(ByteView payload) {
    return byte_label(payload);
}

OutcomeSummary summarize(const ScenarioOutcome& o) {
    OutcomeSummary s;
    for (const auto& d : o.delivered) {
        std::string label = payload_label(d.payload);
        if (!s.delivered.empty() && s.delivered.back().label == label) {
            ++s.delivered.back().count;
        } else {
            s.delivered.push_back({std::move(label), 1});
        }
    }
    s.anomalies = o.codes();
    s.disconnected = o.disconnected;
    return s;
}

BehaviorProfile fingerprint(const std::string& broker_label, const std::vector<CorpusResult>& results,
                            std::vector<ScenarioOutcome>* outcomes) {
    BehaviorProfile profile;
    profile.broker_label = broker_label;
    for (const auto& r : results) {
        ScenarioOutcome o;
        o.experiment_name = r.experiment.name;
        if (r.skipped()) {
            o.trace_detail = r.skipped_reason;
            OutcomeSummary s;
            s.skipped = true;
            profile.outcomes[r.experiment.name] = s;
        } else {
            o = evaluate_trace(r.experiment, *r.trace);
            apply_liveness(o, r.experiment, r.liveness_after);
            profile.outcomes[r.experiment.name] = summarize(o);
        }
        if (outcomes) outcomes->push_back(std::move(o));
    }
    return profile;
}

namespace {

std::string render_item(const std::string& label, std::size_t count) {
    if (count == 1) return label;
    if (count <= 3) {
        std::string out = label;
        for (std::size_t i = 1; i < count; ++i) out += "," + label;
        return out;
    }
    return label + " x" + std::to_string(count);
}

std::string render_multiset(const std::vector<DeliveryRun>& runs) {
    std::map<std::string, std::size_t> counts;
    for (const auto& r : runs) counts[r.label] += r.count;
    std::string out = "{";
    bool first = true;
    for (const auto& [label, n] : counts) {
        if (!first) out += ",";
        first = false;
        out += render_item(label, n);
    }
    return out + "}";
}

std::map<std::string, std::size_t> multiset(const std::vector<DeliveryRun>& runs) {
    std::map<std::string, std::size_t> counts;
    for (const auto& r : runs) counts[r.label] += r.count;
    return counts;
}

std::string render_codes(const std::set<AnomalyCode>& codes) {
    std::string out = "{";
    bool first = true;
    for (auto c : codes) {
        if (!first) out += ",";
        first = false;
        out += to_string(c);
    }
    return out + "}";
}

}  // namespace

std::string describe_delivered(const std::vector<DeliveryRun>& runs) {
    std::string out = "[";
    for (std::size_t i = 0; i < runs.size(); ++i) {
        if (i) out += ",";
        out += render_item(runs[i].label, runs[i].count);
    }
    return out + "]";
}

std::vector<Divergence> diff_profiles(const BehaviorProfile& a, const BehaviorProfile& b) {
    std::vector<Divergence> out;
    bool overlap = false;
    for (const auto& [name, sa] : a.outcomes) {
        auto it = b.outcomes.find(name);
        if (it == b.outcomes.end()) continue;
        overlap = true;
        const auto& sb = it->second;
        if (sa.skipped != sb.skipped) {
            out.push_back({name, std::string(sa.skipped ? "skipped" : "ran") + " vs " + (sb.skipped ? "skipped" : "ran")});
            continue;
        }
        if (sa.skipped) continue;
        if (multiset(sa.delivered) != multiset(sb.delivered)) {
            out.push_back({name, "delivered " + render_multiset(sa.delivered) + " vs " + render_multiset(sb.delivered)});
        } else if (sa.delivered != sb.delivered) {
            out.push_back({name, "order " + describe_delivered(sa.delivered) + " vs " + describe_delivered(sb.delivered)});
        }
        if (sa.anomalies != sb.anomalies) {
            out.push_back({name, "anomalies " + render_codes(sa.anomalies) + " vs " + render_codes(sb.anomalies)});
        }
        if (sa.disconnected != sb.disconnected) {
            out.push_back({name, std::string("disconnected ") + (sa.disconnected ? "yes" : "no") + " vs " +
                                     (sb.disconnected ? "yes" : "no")});
        }
    }
    if (!overlap) {
        throw NoOverlap("profiles '" + a.broker_label + "' and '" + b.broker_label + "' share no experiments");
    }
    return out;
}

json anomaly_to_json(const Anomaly& a) {
    return {{"code", std::string(to_string(a.code))},
            {"severity", std::string(to_string(a.severity))},
            {"evidence", a.evidence},
            {"explanation", a.explanation}};
}

json summary_to_json(const OutcomeSummary& s) {
    json delivered = json::array();
    for (const auto& r : s.delivered) delivered.push_back({{"label", r.label}, {"count", r.count}});
    json codes = json::array();
    for (auto c : s.anomalies) codes.push_back(std::string(to_string(c)));
    return {{"delivered", delivered}, {"anomalies", codes}, {"disconnected", s.disconnected}, {"skipped", s.skipped}};
}

json outcome_to_json(const ScenarioOutcome& o) {
    json anomalies = json::array();
    for (const auto& a : o.anomalies) anomalies.push_back(anomaly_to_json(a));
    json acks = json::array();
    for (const auto& a : o.ack_flow) {
        acks.push_back({{"session", a.session},
                        {"type", std::string(packet_type_name(a.type))},
                        {"packet_id", a.packet_id},
                        {"seq", a.seq},
                        {"direction", a.sent ? "sent" : "received"}});
    }
    const OutcomeSummary s = summarize(o);
    json delivered = json::array();
    for (const auto& r : s.delivered) delivered.push_back({{"label", r.label}, {"count", r.count}});
    return {{"experiment", o.experiment_name},
            {"trace_outcome", std::string(to_string(o.trace_outcome))},
            {"trace_detail", o.trace_detail},
            {"delivered", delivered},
            {"delivered_count", o.delivered.size()},
            {"ack_flow", acks},
            {"disconnected", o.disconnected},
            {"anomalies", anomalies}};
}

json profile_to_json(const BehaviorProfile& p) {
    json outcomes = json::object();
    for (const auto& [name, s] : p.outcomes) outcomes[name] = summary_to_json(s);
    return {{"broker", p.broker_label}, {"version", p.version}, {"outcomes", outcomes}};
}

}  // namespace mqfuzz
