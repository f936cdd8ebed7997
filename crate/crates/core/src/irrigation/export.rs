use super::{IrrigationEvent, StagePlan};

/// `stage,start_date,length_days`
pub fn stages_csv(plan: &StagePlan) -> String {
    let mut out = String::from("stage,start_date,length_days\n");
    for s in &plan.stages {
        out.push_str(&format!("{},{},{}\n", s.stage.name(), s.start, s.length_days));
    }
    out
}

/// `date,net_depth_mm,gross_depth_mm,runtime_min`, three decimals each.
pub fn events_csv(events: &[IrrigationEvent]) -> String {
    let mut out = String::from("date,net_depth_mm,gross_depth_mm,runtime_min\n");
    for e in events {
        out.push_str(&format!(
            "{},{:.3},{:.3},{:.3}\n",
            e.date, e.net_depth_mm, e.gross_depth_mm, e.runtime_min
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::irrigation::{stage_plan, Catalog};

    #[test]
    fn beans_stage_table() {
        let cat = Catalog::seeded();
        let plan = stage_plan(cat.crop("beans").unwrap(), "2021-03-01".parse().unwrap());
        assert_eq!(
            stages_csv(&plan),
            "stage,start_date,length_days\n\
             initial,2021-03-01,20\n\
             development,2021-03-21,30\n\
             mid,2021-04-20,30\n\
             late,2021-05-20,10\n"
        );
    }

    #[test]
    fn event_rows() {
        let e = IrrigationEvent {
            date: "2021-03-04".parse().unwrap(),
            net_depth_mm: 20.0,
            gross_depth_mm: 20.0 / 0.9,
            runtime_min: 2.0,
        };
        assert_eq!(
            events_csv(&[e]),
            "date,net_depth_mm,gross_depth_mm,runtime_min\n2021-03-04,20.000,22.222,2.000\n"
        );
    }
}
